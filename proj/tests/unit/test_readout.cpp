#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "avm/gradcheck.hpp"
#include "avm/readout.hpp"
#include "avm/rng.hpp"

using namespace avm;

namespace {

// smooth ramp feature map: channel k varies linearly across the frame
Tensor ramp_fmap(std::size_t h, std::size_t w, std::size_t d) {
    Tensor f = Tensor::leaf({h, w, d});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t k = 0; k < d; ++k)
                f.values()[(y * w + x) * d + k] =
                    0.3 * static_cast<double>(x) / static_cast<double>(w - 1) +
                    0.2 * static_cast<double>(y) / static_cast<double>(h - 1) +
                    0.1 * static_cast<double>(k);
    return f;
}

}  // namespace

TEST_CASE("initialization contracts") {
    ReadoutConfig cfg{.num_neurons = 50, .embed_dim = 8};
    Readout r1(cfg, 42), r2(cfg, 42), r3(cfg, 43);

    for (double v : r1.mu().values()) {
        CHECK(v >= -0.5);
        CHECK(v <= 0.5);
    }
    for (double s : r1.sigma()) CHECK(s == doctest::Approx(0.25).epsilon(1e-12));
    for (std::size_t i = 0; i < r1.weight().numel(); ++i)
        CHECK(r1.weight().values()[i] == r2.weight().values()[i]);
    bool any_diff = false;
    for (std::size_t i = 0; i < r1.weight().numel(); ++i)
        any_diff = any_diff || r1.weight().values()[i] != r3.weight().values()[i];
    CHECK(any_diff);

    CHECK(r1.param_count() == Readout::param_count_formula(cfg));
    ReadoutConfig with_bias = cfg;
    with_bias.bias_enabled = true;
    Readout rb(with_bias, 1);
    CHECK(rb.param_count() == Readout::param_count_formula(with_bias));
    CHECK(rb.param_count() == cfg.num_neurons * (2 + 2 + 8 + 1));

    CHECK_THROWS_AS(Readout(ReadoutConfig{.num_neurons = 0, .embed_dim = 8}, 1), ConfigError);
}

TEST_CASE("zero weights predict exactly 1") {
    ReadoutConfig cfg{.num_neurons = 4, .embed_dim = 3};
    Readout r(cfg, 7);
    for (auto& v : r.weight().values()) v = 0.0;
    Tensor fmap = ramp_fmap(5, 6, 3);
    Tensor y = r.forward(fmap, ReadoutMode::eval);
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y.at(i) == 1.0);
}

TEST_CASE("constant map with one-hot weights gives elu(c)+1") {
    ReadoutConfig cfg{.num_neurons = 2, .embed_dim = 4};
    Readout r(cfg, 8);
    for (auto& v : r.weight().values()) v = 0.0;
    r.weight().values()[0 * 4 + 2] = 1.0;   // neuron 0 reads channel 2
    r.weight().values()[1 * 4 + 1] = 1.0;   // neuron 1 reads channel 1
    for (double c : {-1.5, 0.0, 2.25}) {
        Tensor fmap = Tensor::full({3, 3, 4}, c);
        Tensor y = r.forward(fmap, ReadoutMode::eval);
        const double expect = (c >= 0 ? c : std::expm1(c)) + 1.0;
        CHECK(y.at(0) == doctest::Approx(expect).epsilon(1e-14));
        CHECK(y.at(1) == doctest::Approx(expect).epsilon(1e-14));
    }
}

TEST_CASE("eval mode is deterministic, train mode needs an rng") {
    ReadoutConfig cfg{.num_neurons = 20, .embed_dim = 5};
    Readout r(cfg, 9);
    Tensor fmap = ramp_fmap(6, 8, 5);
    Tensor y1 = r.forward(fmap, ReadoutMode::eval);
    Tensor y2 = r.forward(fmap, ReadoutMode::eval);
    for (std::size_t i = 0; i < y1.numel(); ++i) CHECK(y1.at(i) == y2.at(i));

    CHECK_THROWS_AS(r.forward(fmap, ReadoutMode::train, nullptr), std::logic_error);
    Rng rng(10);
    Tensor t1 = r.forward(fmap, ReadoutMode::train, &rng);
    Tensor t2 = r.forward(fmap, ReadoutMode::train, &rng);
    bool jittered = false;
    for (std::size_t i = 0; i < t1.numel(); ++i) jittered = jittered || t1.at(i) != t2.at(i);
    CHECK(jittered);
}

TEST_CASE("predictions are strictly positive") {
    ReadoutConfig cfg{.num_neurons = 30, .embed_dim = 6};
    Readout r(cfg, 11);
    Rng rng(12);
    for (auto& v : r.weight().values()) v = rng.uniform(-3, 3);
    for (int rep = 0; rep < 10; ++rep) {
        Tensor fmap = Tensor::leaf({4, 7, 6});
        for (auto& v : fmap.values()) v = rng.uniform(-50, 50);
        Tensor y = r.forward(fmap, ReadoutMode::eval);
        for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y.at(i) > 0.0);
    }
}

TEST_CASE("gradient flows to mu (finite differences in eval mode)") {
    ReadoutConfig cfg{.num_neurons = 3, .embed_dim = 4};
    Readout r(cfg, 13);
    Rng rng(14);
    Tensor fmap = Tensor::leaf({5, 6, 4});
    for (auto& v : fmap.values()) v = rng.uniform(-1, 1);
    // keep positions off grid-cell boundaries
    double offsets[] = {0.17, -0.33, 0.41, 0.09, -0.57, 0.23};
    std::copy(std::begin(offsets), std::end(offsets), r.mu().values().begin());

    auto f = [&]() {
        Tensor y = r.forward(fmap, ReadoutMode::eval);
        return sum_all(mul(y, y));
    };
    auto report = finite_difference_check(
        f, {{"mu", r.mu()}, {"weight", r.weight()}, {"sigma_raw", r.sigma_raw()}});
    CHECK(report.max_rel_err < 1e-4);
    // sigma is unused in eval mode: gradient and finite difference both zero
    CHECK(report.params[2].max_rel_err == 0.0);
}

TEST_CASE("train-mode jitter average approaches the eval prediction") {
    ReadoutConfig cfg{.num_neurons = 5, .embed_dim = 3};
    Readout r(cfg, 15);
    Tensor fmap = ramp_fmap(9, 12, 3);
    Tensor eval_pred = r.forward(fmap, ReadoutMode::eval);

    Rng rng(16);
    std::vector<double> acc(cfg.num_neurons, 0.0);
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
        Tensor y = r.forward(fmap, ReadoutMode::train, &rng);
        for (std::size_t n = 0; n < cfg.num_neurons; ++n) acc[n] += y.at(n);
    }
    for (std::size_t n = 0; n < cfg.num_neurons; ++n) {
        const double mean = acc[n] / draws;
        CHECK(std::abs(mean - eval_pred.at(n)) / eval_pred.at(n) < 0.05);
    }
}

TEST_CASE("mu clamping keeps positions in frame") {
    ReadoutConfig cfg{.num_neurons = 2, .embed_dim = 2};
    Readout r(cfg, 17);
    r.mu().values()[0] = 3.5;
    r.mu().values()[1] = -2.0;
    r.clamp_mu();
    CHECK(r.mu().values()[0] == 1.0);
    CHECK(r.mu().values()[1] == -1.0);
}
