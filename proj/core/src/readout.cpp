#include "avm/readout.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace avm {

Readout::Readout(ReadoutConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg_.num_neurons < 1) throw ConfigError("readout: num_neurons must be >= 1");
    Rng rng(seed);
    const std::size_t n = cfg_.num_neurons, d = cfg_.embed_dim;
    mu_ = Tensor::leaf({n, 2}, true);
    for (auto& v : mu_.values()) v = rng.uniform(-0.5, 0.5);
    // softplus(sigma_raw) == 0.25 at init
    sigma_raw_ = Tensor::full({n, 2}, std::log(std::expm1(0.25)), true);
    weight_ = init_weight(rng, d, {n, d});
    if (cfg_.bias_enabled) bias_ = Tensor::zeros({n}, true);
}

std::vector<double> Readout::sigma() const {
    std::vector<double> out;
    out.reserve(sigma_raw_.numel());
    for (double v : sigma_raw_.values())
        out.push_back(v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)));
    return out;
}

Tensor Readout::forward(const Tensor& fmap, ReadoutMode mode, Rng* rng) const {
    if (fmap.rank() != 3 || fmap.shape()[2] != cfg_.embed_dim)
        throw ConfigError("readout: feature map " + shape_str(fmap.shape()) +
                          " does not end in embed_dim " + std::to_string(cfg_.embed_dim));
    Tensor pos;
    if (mode == ReadoutMode::train) {
        if (!rng) throw std::logic_error("readout: train mode needs an rng for position jitter");
        Tensor eps = Tensor::leaf({cfg_.num_neurons, 2});
        for (auto& v : eps.values()) v = rng->normal();
        pos = add(mu_, mul(softplus(sigma_raw_), eps));
    } else {
        pos = mu_;
    }
    Tensor sampled = bilinear_sample_rows(fmap, pos);       // [n x d]
    Tensor z = reduce(mul(sampled, weight_), Reduce::sum, 1);  // [n]
    if (cfg_.bias_enabled) z = add(z, bias_);
    return elu_plus_one(z);
}

void Readout::clamp_mu() {
    for (auto& v : mu_.values()) v = std::clamp(v, -1.0, 1.0);
}

std::vector<NamedParam> Readout::named_params() const {
    std::vector<NamedParam> out{{"readout.mu", mu_},
                                {"readout.sigma_raw", sigma_raw_},
                                {"readout.weight", weight_}};
    if (cfg_.bias_enabled) out.push_back({"readout.bias", bias_});
    return out;
}

std::size_t Readout::param_count() const {
    std::size_t n = 0;
    for (const auto& np : named_params()) n += np.tensor.numel();
    return n;
}

std::size_t Readout::param_count_formula(const ReadoutConfig& cfg) {
    return cfg.num_neurons * (2 + 2 + cfg.embed_dim + (cfg.bias_enabled ? 1 : 0));
}

}  // namespace avm
