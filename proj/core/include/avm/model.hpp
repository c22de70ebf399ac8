#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "avm/backbone.hpp"
#include "avm/modulation.hpp"
#include "avm/readout.hpp"

namespace avm {

// Complete architectural description; serializes into checkpoint manifests.
struct ModelSpec {
    BackboneConfig backbone;
    VariantKind variant = VariantKind::plain;
    CamuConfig camu;
    ReadoutConfig readout;
    bool readout_trainable_phase2 = true;
    std::uint64_t seed = 0;

    std::string to_json() const;
    static ModelSpec from_json(const std::string& text);
};

enum class ParamGroup { backbone, modulation, readout };
const char* group_name(ParamGroup g);
ParamGroup group_of(const std::string& param_name);

struct FreezePlan {
    enum class Phase { phase1, phase2 };
    Phase phase = Phase::phase1;
    std::map<ParamGroup, bool> trainable;

    static FreezePlan for_phase1();
    static FreezePlan for_phase2(bool readout_trainable);
};

class Model {
public:
    explicit Model(ModelSpec spec);

    const ModelSpec& spec() const { return spec_; }
    Backbone& backbone() { return *backbone_; }
    const Backbone& backbone() const { return *backbone_; }
    Modulation& modulation() { return *modulation_; }
    const Modulation& modulation() const { return *modulation_; }
    Readout& readout() { return *readout_; }
    const Readout& readout() const { return *readout_; }

    // image [H x W] + behavior [B] -> per-neuron predictions [n]
    Tensor forward(const Tensor& image, const Tensor& behavior, ReadoutMode mode,
                   Rng* rng = nullptr) const;
    // the feature map alone, before the readout
    Tensor features(const Tensor& image, const Tensor& behavior) const;

    std::vector<NamedParam> named_params() const;
    std::vector<NamedParam> trainable_params() const;

    void apply(const FreezePlan& plan);
    std::size_t count_parameters(bool trainable_only) const;
    std::size_t group_count(ParamGroup g) const;

    // FNV-1a over the raw little-endian bytes of every tensor in the group
    std::uint64_t group_hash(ParamGroup g) const;

    void load_values(const std::map<std::string, std::vector<double>>& blobs);

private:
    ModelSpec spec_;
    std::unique_ptr<Backbone> backbone_;
    std::unique_ptr<Modulation> modulation_;
    std::unique_ptr<Readout> readout_;
};

}  // namespace avm
