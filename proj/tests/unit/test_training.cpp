#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "avm/gradcheck.hpp"
#include "avm/training.hpp"

using namespace avm;
namespace fs = std::filesystem;

namespace {

SyntheticWorldConfig tiny_world() {
    SyntheticWorldConfig cfg;
    cfg.num_neurons = 8;
    cfg.image_h = 12;
    cfg.image_w = 16;
    cfg.behavior_dim = 3;
    cfg.num_train_images = 60;
    cfg.num_test_images = 5;
    cfg.test_repeats = 4;
    cfg.seed = 7;
    return cfg;
}

ModelSpec tiny_spec(VariantKind variant = VariantKind::plain) {
    ModelSpec spec;
    spec.backbone.image_h = 12;
    spec.backbone.image_w = 16;
    spec.backbone.patch = 4;
    spec.backbone.embed_dim = 8;
    spec.backbone.num_blocks = 2;
    spec.backbone.num_heads = 2;
    spec.backbone.behavior_dim = 3;
    spec.variant = variant;
    spec.camu.bottleneck = 3;
    spec.readout.num_neurons = 8;
    spec.readout.embed_dim = 8;
    spec.seed = 11;
    return spec;
}

TrainConfig quick_train(std::size_t epochs) {
    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.max_epochs = epochs;
    cfg.seed = 5;
    return cfg;
}

}  // namespace

TEST_CASE("poisson loss closed forms") {
    Tensor one = Tensor::from_values({1, 1}, {1.0});
    CHECK(poisson_loss(one, one, 0.0).item() == doctest::Approx(1.0).epsilon(1e-12));

    Tensor r0 = Tensor::zeros({2, 3});
    Tensor o = Tensor::from_values({2, 3}, {0.5, 1, 2, 3, 0.25, 1.5});
    CHECK(poisson_loss(r0, o, 1e-8).item() == doctest::Approx(8.25).epsilon(1e-12));

    Tensor re = Tensor::from_values({1, 1}, {1.0});
    Tensor oe = Tensor::from_values({1, 1}, {std::exp(1.0)});
    CHECK(poisson_loss(re, oe, 0.0).item() ==
          doctest::Approx(std::exp(1.0) - 1.0).epsilon(1e-12));

    CHECK_THROWS_AS(poisson_loss(Tensor::zeros({2, 2}), Tensor::zeros({2, 3})),
                    std::invalid_argument);
    Tensor bad = Tensor::from_values({1, 1}, {0.0});
    CHECK_THROWS_AS(poisson_loss(one, bad), std::invalid_argument);
}

TEST_CASE("poisson loss gradient is 1 - r/(o+eps)") {
    Rng rng(3);
    const double eps = 1e-8;
    Tensor r = Tensor::leaf({3, 4});
    for (auto& v : r.values()) v = static_cast<double>(rng.poisson(2.0));
    Tensor o = Tensor::leaf({3, 4}, true);
    for (auto& v : o.values()) v = rng.uniform(0.5, 3.0);

    Tape tape;
    {
        TapeScope scope(tape);
        tape.backward(poisson_loss(r, o, eps));
    }
    for (std::size_t i = 0; i < o.numel(); ++i) {
        const double expect = 1.0 - r.values()[i] / (o.values()[i] + eps);
        CHECK(o.grad()[i] == doctest::Approx(expect).epsilon(1e-12));
    }

    auto f = [&]() { return poisson_loss(r, o, eps); };
    auto report = finite_difference_check(f, {{"o", o}});
    CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("adamw: zero gradient leaves parameters, first step matches closed form") {
    Tensor theta = Tensor::from_values({3}, {0.4, -0.2, 1.0}, true);
    AdamW opt({{"theta", theta}}, 0.01, 0.0);
    for (int i = 0; i < 5; ++i) {
        theta.zero_grad();
        opt.step();
    }
    CHECK(theta.values()[0] == 0.4);
    CHECK(theta.values()[1] == -0.2);
    CHECK(theta.values()[2] == 1.0);

    Tensor zero = Tensor::zeros({1}, true);
    AdamW opt2({{"zero", zero}}, 0.01, 0.0);
    zero.grad()[0] = 1.0;
    opt2.step();
    CHECK(zero.values()[0] == doctest::Approx(-0.01 / (1.0 + 1e-8)).epsilon(1e-12));

    // frozen parameters never reach the optimizer
    Tensor frozen = Tensor::zeros({2}, false);
    CHECK_THROWS_AS(AdamW({{"frozen", frozen}}, 0.01, 0.0), std::logic_error);
}

TEST_CASE("adamw: decoupled weight decay shrinks parameters without gradients") {
    Tensor theta = Tensor::from_values({1}, {2.0}, true);
    AdamW opt({{"theta", theta}}, 0.1, 0.01);
    theta.zero_grad();
    opt.step();
    CHECK(theta.values()[0] == doctest::Approx(2.0 - 0.1 * 0.01 * 2.0).epsilon(1e-12));
}

TEST_CASE("scheduler semantics") {
    TrainConfig cfg;  // patience 10, decay 0.3, 3 decays max

    SUBCASE("strictly decreasing: keep forever") {
        std::vector<double> hist;
        for (int i = 0; i < 400; ++i) {
            hist.push_back(10.0 - i * 0.01);
            auto d = lr_schedule_step(hist, cfg);
            CHECK(d.action == SchedulerAction::keep);
            CHECK(d.lr == cfg.lr);
        }
    }

    SUBCASE("constant loss: first decay at plateau epoch patience+1") {
        std::vector<double> hist;
        for (int epoch = 1; epoch <= 11; ++epoch) {
            hist.push_back(1.0);
            auto d = lr_schedule_step(hist, cfg);
            if (epoch <= 10)
                CHECK(d.action == SchedulerAction::keep);
            else {
                CHECK(d.action == SchedulerAction::decay);
                CHECK(d.lr == doctest::Approx(cfg.lr * 0.3));
            }
        }
    }

    SUBCASE("constant loss forever: stop after 3 decay windows") {
        // oracle simulation: decays at 11, 21, 31; stop at 41
        std::vector<double> hist;
        std::vector<std::size_t> decay_epochs;
        std::size_t stop_epoch = 0;
        for (std::size_t epoch = 1; epoch <= 60 && stop_epoch == 0; ++epoch) {
            hist.push_back(1.0);
            auto d = lr_schedule_step(hist, cfg);
            if (d.action == SchedulerAction::decay) decay_epochs.push_back(epoch);
            if (d.action == SchedulerAction::stop) stop_epoch = epoch;
        }
        CHECK(decay_epochs == std::vector<std::size_t>{11, 21, 31});
        CHECK(stop_epoch == 41);
    }

    SUBCASE("pure function of history") {
        std::vector<double> hist{3.0, 2.5, 2.5, 2.4};
        auto a = lr_schedule_step(hist, cfg);
        auto b = lr_schedule_step(hist, cfg);
        CHECK(a.action == b.action);
        CHECK(a.lr == b.lr);
        CHECK(a.decays == b.decays);
    }

    SUBCASE("improvement below the threshold does not reset the plateau") {
        std::vector<double> hist;
        for (int epoch = 1; epoch <= 11; ++epoch) hist.push_back(1.0 - epoch * 1e-9);
        CHECK(lr_schedule_step(hist, cfg).action == SchedulerAction::decay);
    }
}

TEST_CASE("phase 1 training learns and is deterministic") {
    auto world_cfg = tiny_world();
    auto gen = generate_world(world_cfg);

    Model m1(tiny_spec());
    auto r1 = train_phase1(m1, gen.bundle, quick_train(6));

    // epoch-0 val row exists, and training improved on it
    REQUIRE(!r1.log.empty());
    CHECK(r1.log.front().epoch == 0);
    CHECK(r1.log.front().split == "val");
    const double initial = r1.log.front().loss;
    CHECK(r1.checkpoint.best_val_loss < initial);

    // best-checkpoint contract: no logged val loss beats it
    for (const auto& row : r1.log)
        if (row.split == "val") CHECK(r1.checkpoint.best_val_loss <= row.loss + 1e-15);

    // bit-exact determinism across reruns
    Model m2(tiny_spec());
    auto r2 = train_phase1(m2, gen.bundle, quick_train(6));
    CHECK(r1.checkpoint.best_val_loss == r2.checkpoint.best_val_loss);
    CHECK(r1.checkpoint.params == r2.checkpoint.params);
}

TEST_CASE("phase 2 freezes the backbone and starts at the frozen model's loss") {
    auto world_cfg = tiny_world();
    auto gen = generate_world(world_cfg);

    Model base(tiny_spec());
    auto phase1 = train_phase1(base, gen.bundle, quick_train(4));

    // shifted condition
    ConditionShift shift;
    shift.kind = ShiftKind::environment;
    shift.contrast = 0.7;
    shift.offset = 0.1;
    shift.response_gain = 1.4;
    auto shifted = apply_shift(gen.bundle, gen.world, shift);

    // adaptation model: same backbone/readout weights, avm wiring added
    ModelSpec adapt_spec = tiny_spec(VariantKind::avm);
    Model adapted(adapt_spec);
    for (auto& np : adapted.named_params()) {
        auto it = phase1.checkpoint.params.find(np.name);
        if (it != phase1.checkpoint.params.end()) {
            auto vals = const_cast<Tensor&>(np.tensor).values();
            std::copy(it->second.begin(), it->second.end(), vals.begin());
        }
    }
    const std::uint64_t backbone_hash = adapted.group_hash(ParamGroup::backbone);

    auto phase2 = train_phase2(adapted, shifted.bundle, quick_train(5));

    CHECK(adapted.group_hash(ParamGroup::backbone) == backbone_hash);
    CHECK(phase2.checkpoint.phase == "phase2");

    // step-0 loss equals the frozen phase-1 model's loss on the new data
    Model frozen = model_from_checkpoint(phase1.checkpoint);
    Trainer probe(frozen, shifted.bundle, quick_train(1), FreezePlan::for_phase1());
    const double frozen_val = probe.split_loss(shifted.bundle.splits.val);
    CHECK(phase2.log.front().epoch == 0);
    CHECK(phase2.log.front().loss == frozen_val);

    // no optimizer state for frozen parameters
    for (const auto& [name, values] : phase2.checkpoint.opt_m)
        CHECK(group_of(name) != ParamGroup::backbone);

    // adaptation made progress on the shifted condition
    CHECK(phase2.checkpoint.best_val_loss < phase2.log.front().loss);
}

TEST_CASE("checkpoint round-trip resumes bit-exactly") {
    auto world_cfg = tiny_world();
    auto gen = generate_world(world_cfg);

    // uninterrupted run: 4 epochs
    Model straight(tiny_spec());
    Trainer t_straight(straight, gen.bundle, quick_train(10), FreezePlan::for_phase1());
    for (int i = 0; i < 4; ++i) t_straight.run_epoch();

    // interrupted run: 2 epochs, save, load into a fresh model, 2 more
    Model part1(tiny_spec());
    Trainer t1(part1, gen.bundle, quick_train(10), FreezePlan::for_phase1());
    t1.run_epoch();
    t1.run_epoch();
    fs::path dir = fs::temp_directory_path() / "avm_ckpt_roundtrip";
    fs::remove_all(dir);
    t1.snapshot().save(dir.string());

    Checkpoint loaded = Checkpoint::load(dir.string());
    Model part2(loaded.spec);
    Trainer t2(part2, gen.bundle, quick_train(10), FreezePlan::for_phase1());
    t2.restore(loaded);
    CHECK(t2.epoch() == 2);
    t2.run_epoch();
    t2.run_epoch();

    auto a = straight.named_params();
    auto b = part2.named_params();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        auto va = a[i].tensor.values();
        auto vb = b[i].tensor.values();
        for (std::size_t k = 0; k < va.size(); ++k) CHECK(va[k] == vb[k]);
    }
    CHECK(t_straight.val_history() == t2.val_history());
    fs::remove_all(dir);
}

TEST_CASE("training log format") {
    std::vector<LogRow> log{{0, "val", 1.5, 0.0016, 0.0}, {1, "train", 1.2, 0.0016, 2.5}};
    fs::path path = fs::temp_directory_path() / "avm_train_log.csv";
    write_train_log(log, path.string());
    std::ifstream f(path);
    std::string line;
    std::getline(f, line);
    CHECK(line == "epoch,split,loss,lr,seconds");
    std::getline(f, line);
    CHECK(line.rfind("0,val,1.5", 0) == 0);
    fs::remove(path);
}
