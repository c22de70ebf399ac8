#include <benchmark/benchmark.h>

#include "avm/model.hpp"
#include "avm/training.hpp"

namespace {

avm::ModelSpec bench_spec(avm::VariantKind variant) {
    avm::ModelSpec spec;
    spec.backbone.image_h = 36;
    spec.backbone.image_w = 64;
    spec.variant = variant;
    spec.readout.num_neurons = 200;
    spec.readout.embed_dim = spec.backbone.embed_dim;
    spec.seed = 7;
    return spec;
}

struct Inputs {
    avm::Tensor image = avm::Tensor::leaf({36, 64});
    avm::Tensor behavior = avm::Tensor::leaf({5});
    Inputs() {
        avm::Rng rng(11);
        for (auto& v : image.values()) v = rng.uniform(-1, 1);
        for (auto& v : behavior.values()) v = rng.uniform(-1, 1);
    }
};

void BM_forward_eval(benchmark::State& state) {
    const auto variant = static_cast<avm::VariantKind>(state.range(0));
    avm::Model model(bench_spec(variant));
    Inputs in;
    for (auto _ : state) {
        avm::Tensor y = model.forward(in.image, in.behavior, avm::ReadoutMode::eval);
        benchmark::DoNotOptimize(y.values().data());
    }
}
BENCHMARK(BM_forward_eval)
    ->Arg(static_cast<int>(avm::VariantKind::plain))
    ->Arg(static_cast<int>(avm::VariantKind::avm))
    ->Arg(static_cast<int>(avm::VariantKind::avm_b));

void BM_train_step(benchmark::State& state) {
    avm::Model model(bench_spec(avm::VariantKind::plain));
    Inputs in;
    avm::Rng rng(13);
    avm::Tensor responses = avm::Tensor::leaf({1, 200});
    for (auto& v : responses.values()) v = static_cast<double>(rng.poisson(1.5));
    avm::AdamW opt(model.trainable_params(), 0.0016, 1e-4);
    for (auto _ : state) {
        avm::Tape tape;
        {
            avm::TapeScope scope(tape);
            opt.zero_grad();
            avm::Tensor pred = model.forward(in.image, in.behavior, avm::ReadoutMode::train, &rng);
            avm::Tensor loss =
                avm::poisson_loss(responses, avm::reshape(pred, {1, 200}), 1e-8);
            tape.backward(loss);
        }
        opt.step();
    }
}
BENCHMARK(BM_train_step);

}  // namespace
