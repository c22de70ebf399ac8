#include <benchmark/benchmark.h>

#include "avm/rng.hpp"
#include "avm/tensor.hpp"

namespace {

avm::Tensor random_leaf(avm::Rng& rng, avm::Shape shape, bool grad = false) {
    avm::Tensor t = avm::Tensor::leaf(std::move(shape), grad);
    for (auto& v : t.values()) v = rng.uniform(-1, 1);
    return t;
}

void BM_matmul_forward(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    avm::Rng rng(1);
    avm::Tensor a = random_leaf(rng, {n, n});
    avm::Tensor b = random_leaf(rng, {n, n});
    for (auto _ : state) {
        avm::Tensor c = avm::matmul(a, b);
        benchmark::DoNotOptimize(c.values().data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * n * n * n * 2);
}
BENCHMARK(BM_matmul_forward)->Arg(32)->Arg(64)->Arg(128);

void BM_matmul_with_backward(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    avm::Rng rng(2);
    avm::Tensor a = random_leaf(rng, {n, n}, true);
    avm::Tensor b = random_leaf(rng, {n, n}, true);
    for (auto _ : state) {
        avm::Tape tape;
        avm::TapeScope scope(tape);
        avm::Tensor loss = avm::sum_all(avm::matmul(a, b));
        tape.backward(loss);
        benchmark::DoNotOptimize(a.grad().data());
    }
}
BENCHMARK(BM_matmul_with_backward)->Arg(32)->Arg(64);

void BM_softmax_rows(benchmark::State& state) {
    avm::Rng rng(3);
    avm::Tensor x = random_leaf(rng, {64, 64});
    for (auto _ : state) {
        avm::Tensor y = avm::softmax_lastdim(x);
        benchmark::DoNotOptimize(y.values().data());
    }
}
BENCHMARK(BM_softmax_rows);

void BM_bilinear_sample_rows(benchmark::State& state) {
    avm::Rng rng(4);
    avm::Tensor fmap = random_leaf(rng, {9, 16, 64});
    avm::Tensor pos = avm::Tensor::leaf({200, 2});
    for (auto& v : pos.values()) v = rng.uniform(-1, 1);
    for (auto _ : state) {
        avm::Tensor out = avm::bilinear_sample_rows(fmap, pos);
        benchmark::DoNotOptimize(out.values().data());
    }
}
BENCHMARK(BM_bilinear_sample_rows);

}  // namespace
