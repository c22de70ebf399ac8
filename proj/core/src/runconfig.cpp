#include "avm/runconfig.hpp"

#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

namespace avm {

using nlohmann::json;

namespace {

void reject_unknown(const json& obj, const std::set<std::string>& known,
                    const std::string& where) {
    for (const auto& [key, value] : obj.items())
        if (!known.count(key))
            throw ConfigError("config: unknown key '" + where + key + "'");
}

template <typename T>
void take(const json& obj, const char* key, T& out) {
    if (obj.contains(key)) out = obj.at(key).get<T>();
}

}  // namespace

RunConfig RunConfig::from_json_text(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: malformed JSON: ") + e.what());
    }
    if (!doc.is_object()) throw ConfigError("config: document must be a JSON object");
    reject_unknown(doc, {"backbone", "camu", "readout", "train", "world"}, "");

    RunConfig cfg;
    if (doc.contains("backbone")) {
        const json& b = doc["backbone"];
        reject_unknown(b,
                       {"image_h", "image_w", "patch", "embed_dim", "num_blocks", "num_heads",
                        "behavior_dim", "layernorm_enabled"},
                       "backbone.");
        take(b, "image_h", cfg.backbone.image_h);
        take(b, "image_w", cfg.backbone.image_w);
        take(b, "patch", cfg.backbone.patch);
        take(b, "embed_dim", cfg.backbone.embed_dim);
        take(b, "num_blocks", cfg.backbone.num_blocks);
        take(b, "num_heads", cfg.backbone.num_heads);
        take(b, "behavior_dim", cfg.backbone.behavior_dim);
        take(b, "layernorm_enabled", cfg.backbone.layernorm_enabled);
    }
    if (doc.contains("camu")) {
        const json& c = doc["camu"];
        reject_unknown(c, {"bottleneck", "weight"}, "camu.");
        take(c, "bottleneck", cfg.camu.bottleneck);
        take(c, "weight", cfg.camu.weight);
    }
    if (doc.contains("readout")) {
        const json& r = doc["readout"];
        reject_unknown(r, {"bias_enabled", "trainable_phase2"}, "readout.");
        take(r, "bias_enabled", cfg.readout_bias);
        take(r, "trainable_phase2", cfg.readout_trainable_phase2);
    }
    if (doc.contains("train")) {
        const json& t = doc["train"];
        reject_unknown(t,
                       {"batch_size", "lr", "max_epochs", "plateau_patience", "lr_decay_factor",
                        "weight_decay", "max_decays_before_stop", "loss_eps",
                        "plateau_improvement", "seed"},
                       "train.");
        take(t, "batch_size", cfg.train.batch_size);
        take(t, "lr", cfg.train.lr);
        take(t, "max_epochs", cfg.train.max_epochs);
        take(t, "plateau_patience", cfg.train.plateau_patience);
        take(t, "lr_decay_factor", cfg.train.lr_decay_factor);
        take(t, "weight_decay", cfg.train.weight_decay);
        take(t, "max_decays_before_stop", cfg.train.max_decays_before_stop);
        take(t, "loss_eps", cfg.train.loss_eps);
        take(t, "plateau_improvement", cfg.train.plateau_improvement);
        take(t, "seed", cfg.train.seed);
    }
    if (doc.contains("world")) {
        const json& w = doc["world"];
        reject_unknown(w,
                       {"num_neurons", "image_h", "image_w", "behavior_dim", "num_train_images",
                        "num_test_images", "test_repeats", "val_fraction", "stim_freq_lo",
                        "stim_freq_hi", "gratings_per_image", "gabor_gain", "behavior_gain",
                        "baseline_lo", "baseline_hi", "poisson_sampling", "seed"},
                       "world.");
        take(w, "num_neurons", cfg.world.num_neurons);
        take(w, "image_h", cfg.world.image_h);
        take(w, "image_w", cfg.world.image_w);
        take(w, "behavior_dim", cfg.world.behavior_dim);
        take(w, "num_train_images", cfg.world.num_train_images);
        take(w, "num_test_images", cfg.world.num_test_images);
        take(w, "test_repeats", cfg.world.test_repeats);
        take(w, "val_fraction", cfg.world.val_fraction);
        take(w, "stim_freq_lo", cfg.world.stim_freq_lo);
        take(w, "stim_freq_hi", cfg.world.stim_freq_hi);
        take(w, "gratings_per_image", cfg.world.gratings_per_image);
        take(w, "gabor_gain", cfg.world.gabor_gain);
        take(w, "behavior_gain", cfg.world.behavior_gain);
        take(w, "baseline_lo", cfg.world.baseline_lo);
        take(w, "baseline_hi", cfg.world.baseline_hi);
        take(w, "poisson_sampling", cfg.world.poisson_sampling);
        take(w, "seed", cfg.world.seed);
    }

    cfg.backbone.validate();
    cfg.train.validate();
    cfg.world.validate();
    // keep the synthetic world and the model on the same geometry unless the
    // document overrides both deliberately
    if (!doc.contains("world") || !doc["world"].contains("image_h")) {
        cfg.world.image_h = cfg.backbone.image_h;
        cfg.world.image_w = cfg.backbone.image_w;
    }
    if (!doc.contains("world") || !doc["world"].contains("behavior_dim"))
        cfg.world.behavior_dim = cfg.backbone.behavior_dim;
    return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(f)), {});
    return from_json_text(text);
}

std::string RunConfig::to_json() const {
    json doc;
    doc["backbone"] = {{"image_h", backbone.image_h},
                       {"image_w", backbone.image_w},
                       {"patch", backbone.patch},
                       {"embed_dim", backbone.embed_dim},
                       {"num_blocks", backbone.num_blocks},
                       {"num_heads", backbone.num_heads},
                       {"behavior_dim", backbone.behavior_dim},
                       {"layernorm_enabled", backbone.layernorm_enabled}};
    doc["camu"] = {{"bottleneck", camu.bottleneck}, {"weight", camu.weight}};
    doc["readout"] = {{"bias_enabled", readout_bias},
                      {"trainable_phase2", readout_trainable_phase2}};
    doc["train"] = {{"batch_size", train.batch_size},
                    {"lr", train.lr},
                    {"max_epochs", train.max_epochs},
                    {"plateau_patience", train.plateau_patience},
                    {"lr_decay_factor", train.lr_decay_factor},
                    {"weight_decay", train.weight_decay},
                    {"max_decays_before_stop", train.max_decays_before_stop},
                    {"loss_eps", train.loss_eps},
                    {"plateau_improvement", train.plateau_improvement},
                    {"seed", train.seed}};
    doc["world"] = json::parse(world.to_json());
    return doc.dump(2);
}

void RunConfig::echo_to(const std::string& dir) const {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    std::ofstream f(fs::path(dir) / "config.json");
    if (!f) throw std::runtime_error("config: cannot echo to " + dir);
    f << to_json() << '\n';
}

ModelSpec RunConfig::model_spec(std::size_t num_neurons) const {
    ModelSpec spec;
    spec.backbone = backbone;
    spec.variant = VariantKind::plain;
    spec.camu = camu;
    spec.readout.num_neurons = num_neurons;
    spec.readout.embed_dim = backbone.embed_dim;
    spec.readout.bias_enabled = readout_bias;
    spec.readout_trainable_phase2 = readout_trainable_phase2;
    spec.seed = train.seed;
    return spec;
}

}  // namespace avm
