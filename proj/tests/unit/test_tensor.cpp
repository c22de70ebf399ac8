#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "avm/gradcheck.hpp"
#include "avm/rng.hpp"
#include "avm/tensor.hpp"

using namespace avm;

namespace {

// independent oracle: naive triple-loop matrix product
std::vector<double> matmul_oracle(const std::vector<double>& a, const std::vector<double>& b,
                                  std::size_t p, std::size_t q, std::size_t r) {
    std::vector<double> c(p * r, 0.0);
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < r; ++j)
            for (std::size_t k = 0; k < q; ++k) c[i * r + j] += a[i * q + k] * b[k * r + j];
    return c;
}

Tensor random_leaf(Rng& rng, Shape shape, bool requires_grad = false) {
    Tensor t = Tensor::leaf(std::move(shape), requires_grad);
    for (auto& v : t.values()) v = rng.uniform(-1.0, 1.0);
    return t;
}

}  // namespace

TEST_CASE("matmul identity and scalar cases") {
    Tensor a = Tensor::from_values({2, 2}, {1, 2, 3, 4});
    Tensor eye = Tensor::from_values({2, 2}, {1, 0, 0, 1});
    Tensor c = matmul(a, eye);
    CHECK(c.at(0, 0) == 1.0);
    CHECK(c.at(0, 1) == 2.0);
    CHECK(c.at(1, 0) == 3.0);
    CHECK(c.at(1, 1) == 4.0);

    Tensor s = matmul(Tensor::from_values({1, 1}, {2}), Tensor::from_values({1, 1}, {3}));
    CHECK(s.item() == 6.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
    Rng rng(17);
    Tensor a = random_leaf(rng, {3, 4});
    Tensor b = random_leaf(rng, {4, 2});
    Tensor c = matmul(a, b);
    auto expect = matmul_oracle({a.values().begin(), a.values().end()},
                                {b.values().begin(), b.values().end()}, 3, 4, 2);
    for (std::size_t i = 0; i < expect.size(); ++i)
        CHECK(std::abs(c.values()[i] - expect[i]) < 1e-14);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2, 3});
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), std::invalid_argument);
}

TEST_CASE("relu and elu point values") {
    Tensor x = Tensor::from_values({4}, {-1.0, 2.0, 0.0, -0.5});
    Tensor r = relu(x);
    CHECK(r.at(0) == 0.0);
    CHECK(r.at(1) == 2.0);
    CHECK(r.at(2) == 0.0);

    Tensor e = elu(x);
    CHECK(e.at(1) == 2.0);
    CHECK(e.at(2) == 0.0);
    CHECK(e.at(0) == doctest::Approx(std::exp(-1.0) - 1.0).epsilon(1e-12));
    CHECK(e.at(0) == doctest::Approx(-0.6321205588285577).epsilon(1e-12));
}

TEST_CASE("softmax closed forms and normalization") {
    Tensor c = softmax_lastdim(Tensor::from_values({3}, {5.0, 5.0, 5.0}));
    for (std::size_t i = 0; i < 3; ++i) CHECK(c.at(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    Tensor t = softmax_lastdim(Tensor::from_values({2}, {0.0, std::log(2.0)}));
    CHECK(t.at(0) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
    CHECK(t.at(1) == doctest::Approx(2.0 / 3.0).epsilon(1e-14));

    Rng rng(3);
    for (int rep = 0; rep < 20; ++rep) {
        Tensor x = random_leaf(rng, {4, 7});
        Tensor y = softmax_lastdim(x);
        for (std::size_t r = 0; r < 4; ++r) {
            double sum = 0.0;
            bool positive = true;
            for (std::size_t cidx = 0; cidx < 7; ++cidx) {
                sum += y.at(r, cidx);
                positive = positive && y.at(r, cidx) > 0.0;
            }
            CHECK(std::abs(sum - 1.0) < 1e-12);
            CHECK(positive);
        }
    }
}

TEST_CASE("reduce sum/mean and gradient of sum is ones") {
    Tensor x = Tensor::from_values({3}, {1, 2, 3});
    CHECK(reduce(x, Reduce::sum, 0).item() == 6.0);

    Tensor c = Tensor::full({2, 5}, 3.25);
    Tensor m = reduce(reduce(c, Reduce::mean, 0), Reduce::mean, 0);
    CHECK(m.item() == 3.25);

    Tape tape;
    TapeScope scope(tape);
    Tensor leaf = Tensor::from_values({4}, {0.5, -1, 2, 7}, true);
    Tensor s = sum_all(leaf);
    tape.backward(s);
    for (double g : leaf.grad()) CHECK(g == 1.0);

    CHECK_THROWS_AS(reduce(x, Reduce::sum, 1), std::out_of_range);
}

TEST_CASE("bilinear sample corners, center, constants") {
    // 2x2 map, one channel, values {0,0,0,4} row-major
    Tensor fmap = Tensor::from_values({2, 2, 1}, {0, 0, 0, 4});
    Tensor corner = bilinear_sample(fmap, Tensor::from_values({2}, {-1, -1}));
    CHECK(corner.at(0) == 0.0);
    Tensor far = bilinear_sample(fmap, Tensor::from_values({2}, {1, 1}));
    CHECK(far.at(0) == 4.0);
    Tensor center = bilinear_sample(fmap, Tensor::from_values({2}, {0, 0}));
    CHECK(center.at(0) == doctest::Approx(1.0).epsilon(1e-15));

    Tensor flat = Tensor::full({3, 5, 2}, 0.7);
    Rng rng(5);
    for (int rep = 0; rep < 25; ++rep) {
        Tensor pos = Tensor::from_values({2}, {rng.uniform(-1, 1), rng.uniform(-1, 1)});
        Tensor out = bilinear_sample(flat, pos);
        CHECK(out.at(0) == 0.7);
        CHECK(out.at(1) == 0.7);
    }

    // exact at every grid corner
    Tensor grid = Tensor::from_values({2, 3, 1}, {1, 2, 3, 4, 5, 6});
    for (std::size_t y = 0; y < 2; ++y)
        for (std::size_t x = 0; x < 3; ++x) {
            double px = -1.0 + 2.0 * static_cast<double>(x) / 2.0;
            double py = -1.0 + 2.0 * static_cast<double>(y) / 1.0;
            Tensor out = bilinear_sample(grid, Tensor::from_values({2}, {px, py}));
            CHECK(out.at(0) == grid.at(y * 3 + x));
        }
}

TEST_CASE("backward: x*x at x=3 gives 6") {
    Tape tape;
    TapeScope scope(tape);
    Tensor x = Tensor::from_values({}, {3.0}, true);
    Tensor y = mul(x, x);
    tape.backward(y);
    CHECK(x.grad()[0] == 6.0);
}

TEST_CASE("backward: dead relu units get zero gradient") {
    Tape tape;
    TapeScope scope(tape);
    Tensor x = Tensor::from_values({3}, {-1.0, -2.0, -0.5}, true);
    Tensor s = sum_all(relu(x));
    tape.backward(s);
    for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("backward rejects non-scalar root and roots off the tape") {
    Tape tape;
    TapeScope scope(tape);
    Tensor x = Tensor::from_values({2}, {1.0, 2.0}, true);
    Tensor y = relu(x);
    CHECK_THROWS_AS(tape.backward(y), std::logic_error);

    Tensor stale = Tensor::from_values({}, {1.0}, true);
    CHECK_THROWS_AS(tape.backward(stale), std::logic_error);
}

TEST_CASE("repeated backward without reset accumulates") {
    Tape tape;
    TapeScope scope(tape);
    Tensor x = Tensor::from_values({}, {2.0}, true);
    Tensor y = mul(x, x);
    tape.backward(y);
    CHECK(x.grad()[0] == 4.0);
    tape.backward(y);
    CHECK(x.grad()[0] == 8.0);
}

TEST_CASE("non-requires-grad leaf stays zero after backward") {
    Tape tape;
    TapeScope scope(tape);
    Tensor a = Tensor::from_values({2}, {1.0, 2.0}, true);
    Tensor b = Tensor::from_values({2}, {5.0, -3.0}, false);
    Tensor s = sum_all(mul(a, b));
    tape.backward(s);
    CHECK(a.grad()[0] == 5.0);
    CHECK(a.grad()[1] == -3.0);
    for (double g : b.grad()) CHECK(g == 0.0);
}

TEST_CASE("tape reset drops nodes, leaf values survive forward+backward") {
    Tape tape;
    Tensor x = Tensor::from_values({3}, {0.25, -0.75, 0.5}, true);
    std::vector<double> before(x.values().begin(), x.values().end());
    {
        TapeScope scope(tape);
        Tensor loss = sum_all(mul(x, x));
        tape.backward(loss);
    }
    CHECK(tape.node_count() == 2);
    const auto gen = tape.generation();
    tape.reset();
    CHECK(tape.node_count() == 0);
    CHECK(tape.generation() != gen);
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(x.values()[i] == before[i]);
}

TEST_CASE("forward purity: identical inputs give bit-identical outputs") {
    Rng rng(11);
    Tensor a = random_leaf(rng, {4, 6});
    Tensor b = random_leaf(rng, {6, 3});
    Tensor y1 = softmax_lastdim(matmul(relu(a), b));
    Tensor y2 = softmax_lastdim(matmul(relu(a), b));
    for (std::size_t i = 0; i < y1.numel(); ++i) CHECK(y1.values()[i] == y2.values()[i]);
}

TEST_CASE("random 3-op graph matches central finite differences") {
    Rng rng(23);
    Tensor a = random_leaf(rng, {3, 3}, true);
    Tensor b = random_leaf(rng, {3, 3}, true);
    auto f = [&]() { return sum_all(elu(matmul(a, b))); };
    auto report = finite_difference_check(f, {{"a", a}, {"b", b}}, 1e-5);
    CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("finite differences across the whole op set") {
    Rng rng(29);
    Tensor x = random_leaf(rng, {4, 6}, true);
    Tensor w = random_leaf(rng, {6, 6}, true);
    Tensor v = random_leaf(rng, {6}, true);
    Tensor gamma = Tensor::full({6}, 1.0, true);
    Tensor beta = Tensor::zeros({6}, true);

    SUBCASE("mlp-ish chain with softmax and slicing") {
        auto f = [&]() {
            Tensor h = add_rowvec(matmul(x, w), v);
            Tensor s = softmax_lastdim(slice_cols(h, 1, 4));
            Tensor t = concat_cols({s, mul_scalar(slice_cols(h, 0, 2), 0.5)});
            return sum_all(mul(t, t));
        };
        auto report = finite_difference_check(f, {{"x", x}, {"w", w}, {"v", v}});
        CHECK(report.max_rel_err < 1e-6);
    }

    SUBCASE("softplus, elu, log chain") {
        auto f = [&]() {
            Tensor h = softplus(matmul(x, w));
            Tensor g = log(add_scalar(elu(h), 1.5));
            return sum_all(g);
        };
        auto report = finite_difference_check(f, {{"x", x}, {"w", w}});
        CHECK(report.max_rel_err < 1e-6);
    }

    SUBCASE("layer norm") {
        auto f = [&]() { return sum_all(elu(layer_norm_rows(x, gamma, beta))); };
        auto report = finite_difference_check(f, {{"x", x}, {"gamma", gamma}, {"beta", beta}});
        CHECK(report.max_rel_err < 1e-4);
    }

    SUBCASE("transpose, reshape, reduce") {
        auto f = [&]() {
            Tensor t = matmul(transpose(x), x);
            Tensor r = reduce(reshape(t, {4, 9}), Reduce::mean, 1);
            return sum_all(mul(r, r));
        };
        auto report = finite_difference_check(f, {{"x", x}});
        CHECK(report.max_rel_err < 1e-6);
    }

    SUBCASE("bilinear sample w.r.t. fmap and pos") {
        Tensor fmap = random_leaf(rng, {5, 7, 3}, true);
        // off-boundary positions so the interpolation kink is avoided
        Tensor pos = Tensor::from_values({2, 2}, {0.13, -0.41, -0.72, 0.55}, true);
        auto f = [&]() {
            Tensor s = bilinear_sample_rows(fmap, pos);
            return sum_all(mul(s, s));
        };
        auto report = finite_difference_check(f, {{"fmap", fmap}, {"pos", pos}});
        CHECK(report.max_rel_err < 1e-6);
    }
}

TEST_CASE("finite_difference_check exactness on quadratics and constants") {
    Rng rng(31);
    Tensor theta = random_leaf(rng, {6}, true);
    auto quad = [&]() { return mul_scalar(sum_all(mul(theta, theta)), 0.5); };
    auto report = finite_difference_check(quad, {{"theta", theta}});
    CHECK(report.max_rel_err < 1e-9);

    Tensor unused = random_leaf(rng, {3}, true);
    auto constant = [&]() { return mul_scalar(sum_all(unused), 0.0); };
    auto creport = finite_difference_check(constant, {{"unused", unused}});
    CHECK(creport.max_rel_err == 0.0);
}

TEST_CASE("rng: determinism, keyed streams, poisson mean") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    // keyed streams are order-independent
    Rng k1 = keyed_rng(7, 3, 5);
    Rng k2 = keyed_rng(7, 3, 5);
    CHECK(k1.uniform() == k2.uniform());
    CHECK(keyed_rng(7, 3, 5).next_u64() != keyed_rng(7, 3, 6).next_u64());

    // CLT bound: mean of 10000 draws at rate 3 within 3*sqrt(3/10000)
    Rng p(2024);
    double sum = 0.0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) sum += static_cast<double>(p.poisson(3.0));
    const double mean = sum / n;
    CHECK(std::abs(mean - 3.0) < 3.0 * std::sqrt(3.0 / n));

    // state round-trip resumes the exact stream
    Rng s(9);
    s.normal();
    auto st = s.state();
    double next1 = s.normal();
    Rng resumed(st);
    CHECK(resumed.normal() == next1);
}
