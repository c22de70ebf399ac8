#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "avm/gradcheck.hpp"
#include "avm/modulation.hpp"
#include "avm/rng.hpp"

using namespace avm;

namespace {

BackboneConfig tiny_config() {
    BackboneConfig cfg;
    cfg.image_h = 8;
    cfg.image_w = 8;
    cfg.patch = 4;
    cfg.embed_dim = 6;
    cfg.num_blocks = 3;
    cfg.num_heads = 2;
    cfg.behavior_dim = 2;
    return cfg;
}

Tensor random_leaf(Rng& rng, Shape shape) {
    Tensor t = Tensor::leaf(std::move(shape));
    for (auto& v : t.values()) v = rng.uniform(-1, 1);
    return t;
}

void fill_random(Rng& rng, Tensor& t, double lo = -0.5, double hi = 0.5) {
    for (auto& v : t.values()) v = rng.uniform(lo, hi);
}

void randomize_unit(Rng& rng, CamuParams& p) {
    fill_random(rng, p.down_w);
    fill_random(rng, p.down_b);
    fill_random(rng, p.up_w);
    fill_random(rng, p.up_b);
}

}  // namespace

TEST_CASE("camu unit: identity cases and hand evaluation") {
    Rng rng(1);
    CamuParams p;
    p.down_w = random_leaf(rng, {4, 2});
    p.down_b = random_leaf(rng, {2});
    p.up_w = Tensor::zeros({2, 4});
    p.up_b = Tensor::zeros({4});
    p.weight = 2.7;

    Tensor x = random_leaf(rng, {5, 4});
    Tensor y = camu_forward(x, p);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.values()[i] == x.values()[i]);

    // w = 0 annihilates the branch for any parameters
    fill_random(rng, p.up_w);
    fill_random(rng, p.up_b);
    p.weight = 0.0;
    Tensor y0 = camu_forward(x, p);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y0.values()[i] == x.values()[i]);

    // d=2, m=1, Down=[1,0], Up=[0,1], x=[3,5] -> [3, 5+relu(3)] = [3,8]
    CamuParams h;
    h.down_w = Tensor::from_values({2, 1}, {1, 0});
    h.down_b = Tensor::zeros({1});
    h.up_w = Tensor::from_values({1, 2}, {0, 1});
    h.up_b = Tensor::zeros({2});
    h.weight = 1.0;
    Tensor hx = Tensor::from_values({1, 2}, {3, 5});
    Tensor hy = camu_forward(hx, h);
    CHECK(hy.at(0, 0) == 3.0);
    CHECK(hy.at(0, 1) == 8.0);

    CHECK_THROWS_AS(camu_forward(Tensor::zeros({1, 3}), h), ConfigError);
}

TEST_CASE("zero-initialized modulation leaves the block untouched") {
    auto cfg = tiny_config();
    Backbone bb(cfg, 2);
    Modulation mod(VariantKind::avm, cfg, {.bottleneck = 3, .weight = 1.0}, 3);

    Rng rng(4);
    Tensor tokens = random_leaf(rng, {cfg.num_tokens(), cfg.embed_dim});
    Tensor b = random_leaf(rng, {cfg.embed_dim});

    auto plain = bb.block_forward(tokens, b, 1);
    auto modded = modulated_block_forward(bb, mod, tokens, b, 1);
    for (std::size_t i = 0; i < tokens.numel(); ++i) {
        CHECK(modded.attn_state.values()[i] == plain.attn_state.values()[i]);
        CHECK(modded.out.values()[i] == plain.out.values()[i]);
    }
}

TEST_CASE("pure-residual block with identity-contribution camus gives 5x") {
    auto cfg = tiny_config();
    const std::size_t d = cfg.embed_dim;
    Backbone bb(cfg, 5);
    auto& blk = bb.block(0);
    for (Tensor* t : {&blk.wq, &blk.bq, &blk.wk, &blk.bk, &blk.wv, &blk.bv, &blk.wo, &blk.bo,
                      &blk.mlp_w1, &blk.mlp_b1, &blk.mlp_w2, &blk.mlp_b2})
        for (auto& v : t->values()) v = 0.0;

    // branch(v) = relu(v) = v on positive inputs when m = d and both maps are I
    CamuConfig cc{.bottleneck = d, .weight = 1.0};
    Modulation mod(VariantKind::avm, cfg, cc, 6);
    for (std::size_t slot = 0; slot < 3; ++slot) {
        auto& u = mod.unit_mut(0, slot);
        for (auto& v : u.down_w.values()) v = 0.0;
        for (auto& v : u.up_w.values()) v = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            u.down_w.values()[i * d + i] = 1.0;
            u.up_w.values()[i * d + i] = 1.0;
        }
    }

    Rng rng(7);
    Tensor tokens = Tensor::leaf({cfg.num_tokens(), d});
    for (auto& v : tokens.values()) v = rng.uniform(0.1, 1.0);  // positive, relu transparent
    Tensor b = Tensor::zeros({d});

    auto out = modulated_block_forward(bb, mod, tokens, b, 0);
    for (std::size_t i = 0; i < tokens.numel(); ++i) {
        CHECK(out.attn_state.values()[i] == doctest::Approx(2.0 * tokens.values()[i]).epsilon(1e-14));
        CHECK(out.mid.values()[i] == doctest::Approx(4.0 * tokens.values()[i]).epsilon(1e-14));
        CHECK(out.out.values()[i] == doctest::Approx(5.0 * tokens.values()[i]).epsilon(1e-14));
    }
}

TEST_CASE("camu gradients match finite differences with backbone frozen") {
    auto cfg = tiny_config();
    Backbone bb(cfg, 8);
    Modulation mod(VariantKind::avm, cfg, {.bottleneck = 2, .weight = 1.0}, 9);
    Rng rng(10);
    for (std::size_t blk = 0; blk < cfg.num_blocks; ++blk)
        for (std::size_t slot = 0; slot < 3; ++slot) randomize_unit(rng, mod.unit_mut(blk, slot));

    Tensor img = random_leaf(rng, {cfg.image_h, cfg.image_w});
    Tensor beh = random_leaf(rng, {cfg.behavior_dim});
    for (auto& np : mod.named_params()) const_cast<Tensor&>(np.tensor).set_requires_grad(true);

    auto f = [&]() {
        Tensor fmap = variant_forward(bb, mod, img, beh);
        return sum_all(mul(fmap, fmap));
    };
    std::vector<std::pair<std::string, Tensor>> params;
    for (auto& np : mod.named_params()) params.emplace_back(np.name, np.tensor);
    auto report = finite_difference_check(f, params);
    CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("variant structure and parameter ordering") {
    BackboneConfig dflt;  // d=64, L=4
    CamuConfig cc;        // m=31
    Modulation avm(VariantKind::avm, dflt, cc, 1);
    Modulation avms(VariantKind::avm_s, dflt, cc, 1);
    Modulation avmb(VariantKind::avm_b, dflt, cc, 1);

    CHECK(camu_param_count(64, 31) == 64 * 31 + 31 + 31 * 64 + 64);
    CHECK(avm.param_count() == Modulation::variant_param_count(VariantKind::avm, 64, 31, 4));
    CHECK(avms.param_count() == Modulation::variant_param_count(VariantKind::avm_s, 64, 31, 4));
    CHECK(avmb.param_count() == Modulation::variant_param_count(VariantKind::avm_b, 64, 31, 4));
    CHECK(avms.param_count() < avm.param_count());
    CHECK(avm.param_count() < avmb.param_count());
    CHECK(avm.named_params().size() == 4 * 3 * 4);
    CHECK(avmb.num_cross() == 3);
}

TEST_CASE("avm with tied triplets reproduces avm-s exactly") {
    auto cfg = tiny_config();
    Backbone bb(cfg, 11);
    CamuConfig cc{.bottleneck = 2, .weight = 1.0};
    Modulation shared(VariantKind::avm_s, cfg, cc, 12);
    Rng rng(13);
    for (std::size_t slot = 0; slot < 3; ++slot) randomize_unit(rng, shared.unit_mut(0, slot));

    Modulation tied(VariantKind::avm, cfg, cc, 14);
    for (std::size_t blk = 0; blk < cfg.num_blocks; ++blk)
        for (std::size_t slot = 0; slot < 3; ++slot) {
            auto& dst = tied.unit_mut(blk, slot);
            const auto& src = shared.unit(0, slot);
            std::copy(src.down_w.values().begin(), src.down_w.values().end(),
                      dst.down_w.values().begin());
            std::copy(src.down_b.values().begin(), src.down_b.values().end(),
                      dst.down_b.values().begin());
            std::copy(src.up_w.values().begin(), src.up_w.values().end(),
                      dst.up_w.values().begin());
            std::copy(src.up_b.values().begin(), src.up_b.values().end(),
                      dst.up_b.values().begin());
        }

    Tensor img = random_leaf(rng, {cfg.image_h, cfg.image_w});
    Tensor beh = random_leaf(rng, {cfg.behavior_dim});
    Tensor fs = variant_forward(bb, shared, img, beh);
    Tensor ft = variant_forward(bb, tied, img, beh);
    for (std::size_t i = 0; i < fs.numel(); ++i) CHECK(fs.values()[i] == ft.values()[i]);

    // gradient tying: the shared unit's gradient equals the sum over the
    // untied copies when values coincide
    for (auto& np : shared.named_params()) const_cast<Tensor&>(np.tensor).set_requires_grad(true);
    for (auto& np : tied.named_params()) const_cast<Tensor&>(np.tensor).set_requires_grad(true);

    Tape tape;
    {
        TapeScope scope(tape);
        tape.backward(sum_all(variant_forward(bb, shared, img, beh)));
    }
    tape.reset();
    {
        TapeScope scope(tape);
        tape.backward(sum_all(variant_forward(bb, tied, img, beh)));
    }
    for (std::size_t slot = 0; slot < 3; ++slot) {
        auto gs = shared.unit(0, slot).up_w.grad();
        std::vector<double> summed(gs.size(), 0.0);
        for (std::size_t blk = 0; blk < cfg.num_blocks; ++blk) {
            auto gt = tied.unit(blk, slot).up_w.grad();
            for (std::size_t i = 0; i < gt.size(); ++i) summed[i] += gt[i];
        }
        for (std::size_t i = 0; i < gs.size(); ++i)
            CHECK(gs[i] == doctest::Approx(summed[i]).epsilon(1e-10));
    }
}

TEST_CASE("zero_init gives exact identity; one step breaks it; re-init restores") {
    auto cfg = tiny_config();
    Backbone bb(cfg, 15);
    for (auto variant : {VariantKind::avm, VariantKind::avm_s, VariantKind::avm_b}) {
        CAPTURE(variant_name(variant));
        Modulation mod(variant, cfg, {.bottleneck = 3, .weight = 1.0}, 16);
        mod.zero_init(17);
        Rng rng(18);
        double max_diff = 0.0;
        for (int rep = 0; rep < 20; ++rep) {
            Tensor img = random_leaf(rng, {cfg.image_h, cfg.image_w});
            Tensor beh = random_leaf(rng, {cfg.behavior_dim});
            Tensor plain = bb.forward(img, beh);
            Tensor modded = variant_forward(bb, mod, img, beh);
            for (std::size_t i = 0; i < plain.numel(); ++i)
                max_diff = std::max(max_diff, std::abs(plain.values()[i] - modded.values()[i]));
        }
        CHECK(max_diff == 0.0);

        // one gradient step on the up projections changes the output
        for (auto& np : mod.named_params()) const_cast<Tensor&>(np.tensor).set_requires_grad(true);
        Tensor img = random_leaf(rng, {cfg.image_h, cfg.image_w});
        Tensor beh = random_leaf(rng, {cfg.behavior_dim});
        Tape tape;
        {
            TapeScope scope(tape);
            Tensor fmap = variant_forward(bb, mod, img, beh);
            tape.backward(sum_all(mul(fmap, fmap)));
        }
        for (auto& np : mod.named_params()) {
            auto vals = const_cast<Tensor&>(np.tensor).values();
            auto g = np.tensor.grad();
            for (std::size_t i = 0; i < vals.size(); ++i) vals[i] -= 0.05 * g[i];
        }
        Tensor plain = bb.forward(img, beh);
        Tensor modded = variant_forward(bb, mod, img, beh);
        double diff = 0.0;
        for (std::size_t i = 0; i < plain.numel(); ++i)
            diff = std::max(diff, std::abs(plain.values()[i] - modded.values()[i]));
        CHECK(diff > 0.0);

        mod.zero_init(19);
        Tensor restored = variant_forward(bb, mod, img, beh);
        for (std::size_t i = 0; i < plain.numel(); ++i)
            CHECK(restored.values()[i] == plain.values()[i]);
    }
}

TEST_CASE("branch weight scales the modulation delta linearly") {
    auto cfg = tiny_config();
    Backbone bb(cfg, 20);
    Rng rng(21);
    Tensor tokens = random_leaf(rng, {cfg.num_tokens(), cfg.embed_dim});
    Tensor b = random_leaf(rng, {cfg.embed_dim});

    for (std::size_t active_slot = 0; active_slot < 3; ++active_slot) {
        CAPTURE(active_slot);
        Modulation mod(VariantKind::avm, cfg, {.bottleneck = 3, .weight = 1.0}, 22);
        mod.zero_init(23);
        randomize_unit(rng, mod.unit_mut(0, active_slot));

        auto select = [&](const ModulatedBlockOut& o) {
            return active_slot == 0 ? o.attn_state : active_slot == 1 ? o.mid : o.out;
        };
        mod.unit_mut(0, active_slot).weight = 0.0;
        Tensor plain = select(modulated_block_forward(bb, mod, tokens, b, 0));
        mod.unit_mut(0, active_slot).weight = 1.0;
        Tensor at_one = select(modulated_block_forward(bb, mod, tokens, b, 0));
        mod.unit_mut(0, active_slot).weight = 2.5;
        Tensor at_w = select(modulated_block_forward(bb, mod, tokens, b, 0));

        for (std::size_t i = 0; i < plain.numel(); ++i) {
            const double expected =
                plain.values()[i] + 2.5 * (at_one.values()[i] - plain.values()[i]);
            CHECK(at_w.values()[i] == doctest::Approx(expected).epsilon(1e-12));
        }
    }
}

TEST_CASE("weight export file counts and format") {
    auto cfg = tiny_config();  // L = 3
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "avm_camu_export_test";
    fs::remove_all(dir);

    Modulation avm(VariantKind::avm, cfg, {.bottleneck = 2, .weight = 1.0}, 24);
    auto files = avm.export_weights((dir / "avm").string());
    CHECK(files.size() == 9);  // 3 units x 3 blocks

    BackboneConfig four = cfg;
    four.num_blocks = 4;
    Modulation avm4(VariantKind::avm, four, {.bottleneck = 2, .weight = 1.0}, 25);
    CHECK(avm4.export_weights((dir / "avm4").string()).size() == 12);
    Modulation avms(VariantKind::avm_s, four, {.bottleneck = 2, .weight = 1.0}, 26);
    CHECK(avms.export_weights((dir / "avms").string()).size() == 3);
    Modulation avmb(VariantKind::avm_b, four, {.bottleneck = 2, .weight = 1.0}, 27);
    CHECK(avmb.export_weights((dir / "avmb").string()).size() == 15);

    std::ifstream f(files[0]);
    std::string header;
    std::getline(f, header);
    CHECK(header == "block,unit,matrix,row,col,value");
    fs::remove_all(dir);
}
