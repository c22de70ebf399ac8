#pragma once

#include <cstdint>
#include <vector>

#include "avm/backbone.hpp"
#include "avm/rng.hpp"
#include "avm/tensor.hpp"

namespace avm {

enum class ReadoutMode { train, eval };

struct ReadoutConfig {
    std::size_t num_neurons = 200;
    std::size_t embed_dim = 64;
    bool bias_enabled = false;
};

// Neuron-wise Gaussian readout: each neuron owns a learned position mu in
// [-1,1]^2, a per-axis jitter scale sigma (softplus of a free parameter),
// and feature weights. Prediction is ELU(w . f(pos)) + 1, always positive.
// Train mode samples pos = mu + sigma * eps with fresh standard-normal eps;
// eval mode reads exactly at mu and is deterministic.
class Readout {
public:
    Readout(ReadoutConfig cfg, std::uint64_t seed);

    const ReadoutConfig& config() const { return cfg_; }

    Tensor forward(const Tensor& fmap, ReadoutMode mode, Rng* rng = nullptr) const;

    Tensor& mu() { return mu_; }
    Tensor& sigma_raw() { return sigma_raw_; }
    Tensor& weight() { return weight_; }
    Tensor& bias() { return bias_; }
    const Tensor& mu() const { return mu_; }

    // effective sigma values, softplus(sigma_raw)
    std::vector<double> sigma() const;

    // keep positions inside the frame; called after every optimizer step
    void clamp_mu();

    std::vector<NamedParam> named_params() const;
    std::size_t param_count() const;
    static std::size_t param_count_formula(const ReadoutConfig& cfg);

private:
    ReadoutConfig cfg_;
    Tensor mu_;         // [n x 2]
    Tensor sigma_raw_;  // [n x 2]
    Tensor weight_;     // [n x d]
    Tensor bias_;       // [n], present iff bias_enabled
};

}  // namespace avm
