#include "avm/model.hpp"

#include <cstring>
#include <stdexcept>

#include <json.hpp>

namespace avm {

using nlohmann::json;

std::string ModelSpec::to_json() const {
    json j;
    j["backbone"] = {{"image_h", backbone.image_h},       {"image_w", backbone.image_w},
                     {"patch", backbone.patch},           {"embed_dim", backbone.embed_dim},
                     {"num_blocks", backbone.num_blocks}, {"num_heads", backbone.num_heads},
                     {"behavior_dim", backbone.behavior_dim},
                     {"layernorm_enabled", backbone.layernorm_enabled}};
    j["variant"] = variant_name(variant);
    j["camu"] = {{"bottleneck", camu.bottleneck}, {"weight", camu.weight}};
    j["readout"] = {{"num_neurons", readout.num_neurons},
                    {"embed_dim", readout.embed_dim},
                    {"bias_enabled", readout.bias_enabled}};
    j["readout_trainable_phase2"] = readout_trainable_phase2;
    j["seed"] = seed;
    return j.dump();
}

ModelSpec ModelSpec::from_json(const std::string& text) {
    json j = json::parse(text);
    ModelSpec s;
    const auto& b = j.at("backbone");
    s.backbone.image_h = b.at("image_h");
    s.backbone.image_w = b.at("image_w");
    s.backbone.patch = b.at("patch");
    s.backbone.embed_dim = b.at("embed_dim");
    s.backbone.num_blocks = b.at("num_blocks");
    s.backbone.num_heads = b.at("num_heads");
    s.backbone.behavior_dim = b.at("behavior_dim");
    s.backbone.layernorm_enabled = b.at("layernorm_enabled");
    s.variant = variant_from_name(j.at("variant"));
    s.camu.bottleneck = j.at("camu").at("bottleneck");
    s.camu.weight = j.at("camu").at("weight");
    s.readout.num_neurons = j.at("readout").at("num_neurons");
    s.readout.embed_dim = j.at("readout").at("embed_dim");
    s.readout.bias_enabled = j.at("readout").at("bias_enabled");
    s.readout_trainable_phase2 = j.at("readout_trainable_phase2");
    s.seed = j.at("seed");
    return s;
}

const char* group_name(ParamGroup g) {
    switch (g) {
        case ParamGroup::backbone: return "backbone";
        case ParamGroup::modulation: return "modulation";
        case ParamGroup::readout: return "readout";
    }
    return "?";
}

ParamGroup group_of(const std::string& name) {
    if (name.rfind("backbone.", 0) == 0) return ParamGroup::backbone;
    if (name.rfind("mod.", 0) == 0) return ParamGroup::modulation;
    if (name.rfind("readout.", 0) == 0) return ParamGroup::readout;
    throw std::invalid_argument("group_of: unknown parameter '" + name + "'");
}

FreezePlan FreezePlan::for_phase1() {
    FreezePlan p;
    p.phase = Phase::phase1;
    p.trainable = {{ParamGroup::backbone, true},
                   {ParamGroup::modulation, true},
                   {ParamGroup::readout, true}};
    return p;
}

FreezePlan FreezePlan::for_phase2(bool readout_trainable) {
    FreezePlan p;
    p.phase = Phase::phase2;
    p.trainable = {{ParamGroup::backbone, false},
                   {ParamGroup::modulation, true},
                   {ParamGroup::readout, readout_trainable}};
    return p;
}

Model::Model(ModelSpec spec) : spec_(spec) {
    spec_.backbone.validate();
    if (spec_.readout.embed_dim != spec_.backbone.embed_dim)
        throw ConfigError("model: readout embed_dim must match backbone embed_dim");
    backbone_ = std::make_unique<Backbone>(spec_.backbone, mix64(spec_.seed ^ 0xb1));
    modulation_ = std::make_unique<Modulation>(spec_.variant, spec_.backbone, spec_.camu,
                                               mix64(spec_.seed ^ 0xc2));
    readout_ = std::make_unique<Readout>(spec_.readout, mix64(spec_.seed ^ 0xd3));
}

Tensor Model::features(const Tensor& image, const Tensor& behavior) const {
    return variant_forward(*backbone_, *modulation_, image, behavior);
}

Tensor Model::forward(const Tensor& image, const Tensor& behavior, ReadoutMode mode,
                      Rng* rng) const {
    return readout_->forward(features(image, behavior), mode, rng);
}

std::vector<NamedParam> Model::named_params() const {
    std::vector<NamedParam> out = backbone_->named_params();
    for (auto& np : modulation_->named_params()) out.push_back(np);
    for (auto& np : readout_->named_params()) out.push_back(np);
    return out;
}

std::vector<NamedParam> Model::trainable_params() const {
    std::vector<NamedParam> out;
    for (auto& np : named_params())
        if (np.tensor.requires_grad()) out.push_back(np);
    return out;
}

void Model::apply(const FreezePlan& plan) {
    for (auto& np : named_params()) {
        auto it = plan.trainable.find(group_of(np.name));
        if (it != plan.trainable.end())
            const_cast<Tensor&>(np.tensor).set_requires_grad(it->second);
    }
}

std::size_t Model::count_parameters(bool trainable_only) const {
    std::size_t n = 0;
    for (const auto& np : named_params())
        if (!trainable_only || np.tensor.requires_grad()) n += np.tensor.numel();
    return n;
}

std::size_t Model::group_count(ParamGroup g) const {
    std::size_t n = 0;
    for (const auto& np : named_params())
        if (group_of(np.name) == g) n += np.tensor.numel();
    return n;
}

std::uint64_t Model::group_hash(ParamGroup g) const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](const void* data, std::size_t len) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < len; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& np : named_params()) {
        if (group_of(np.name) != g) continue;
        feed(np.name.data(), np.name.size());
        auto vals = np.tensor.values();
        feed(vals.data(), vals.size() * sizeof(double));
    }
    return h;
}

void Model::load_values(const std::map<std::string, std::vector<double>>& blobs) {
    for (auto& np : named_params()) {
        auto it = blobs.find(np.name);
        if (it == blobs.end())
            throw std::runtime_error("model load: missing parameter '" + np.name + "'");
        if (it->second.size() != np.tensor.numel())
            throw std::runtime_error("model load: size mismatch for '" + np.name + "': " +
                                     std::to_string(it->second.size()) + " vs " +
                                     std::to_string(np.tensor.numel()));
        auto vals = const_cast<Tensor&>(np.tensor).values();
        std::copy(it->second.begin(), it->second.end(), vals.begin());
    }
}

}  // namespace avm
