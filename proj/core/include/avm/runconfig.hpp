#pragma once

#include <string>

#include "avm/model.hpp"
#include "avm/synthdata.hpp"
#include "avm/training.hpp"

namespace avm {

// JSON run configuration. Every field is optional and falls back to the
// published defaults; unknown keys anywhere in the document are rejected.
struct RunConfig {
    BackboneConfig backbone;
    CamuConfig camu;
    bool readout_bias = false;
    bool readout_trainable_phase2 = true;
    TrainConfig train;
    SyntheticWorldConfig world;

    static RunConfig from_json_text(const std::string& text);
    static RunConfig from_file(const std::string& path);

    // the effective, post-default document; written into every run directory
    std::string to_json() const;
    void echo_to(const std::string& dir) const;

    ModelSpec model_spec(std::size_t num_neurons) const;
};

}  // namespace avm
