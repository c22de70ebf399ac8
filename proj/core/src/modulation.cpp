#include "avm/modulation.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace avm {

const char* variant_name(VariantKind k) {
    switch (k) {
        case VariantKind::plain: return "plain";
        case VariantKind::avm: return "avm";
        case VariantKind::avm_s: return "avm-s";
        case VariantKind::avm_b: return "avm-b";
    }
    return "?";
}

VariantKind variant_from_name(const std::string& name) {
    if (name == "plain") return VariantKind::plain;
    if (name == "avm") return VariantKind::avm;
    if (name == "avm-s" || name == "avm_s") return VariantKind::avm_s;
    if (name == "avm-b" || name == "avm_b") return VariantKind::avm_b;
    throw ConfigError("unknown variant '" + name + "'");
}

std::size_t camu_param_count(std::size_t d, std::size_t m) {
    return d * m + m + m * d + d;
}

Tensor camu_branch(const Tensor& x, const CamuParams& p) {
    if (x.rank() != 2 || x.shape()[1] != p.down_w.shape()[0])
        throw ConfigError("camu: token dim " + shape_str(x.shape()) + " vs down " +
                          shape_str(p.down_w.shape()));
    Tensor h = relu(add_rowvec(matmul(x, p.down_w), p.down_b));
    Tensor up = add_rowvec(matmul(h, p.up_w), p.up_b);
    return mul_scalar(up, p.weight);
}

Tensor camu_forward(const Tensor& x, const CamuParams& p) {
    return add(x, camu_branch(x, p));
}

namespace {

CamuParams make_camu(Rng& rng, std::size_t d, std::size_t m, double weight) {
    CamuParams p;
    p.down_w = init_weight(rng, d, {d, m});
    p.down_b = Tensor::zeros({m}, true);
    p.up_w = Tensor::zeros({m, d}, true);
    p.up_b = Tensor::zeros({d}, true);
    p.weight = weight;
    return p;
}

}  // namespace

Modulation::Modulation(VariantKind kind, const BackboneConfig& backbone, CamuConfig cfg,
                       std::uint64_t seed)
    : kind_(kind), cfg_(cfg), embed_dim_(backbone.embed_dim), num_blocks_(backbone.num_blocks) {
    if (kind_ == VariantKind::plain) return;
    if (cfg_.bottleneck < 1) throw ConfigError("camu: bottleneck must be >= 1");
    Rng rng(seed);
    const std::size_t triplets = kind_ == VariantKind::avm_s ? 1 : num_blocks_;
    for (std::size_t t = 0; t < triplets; ++t)
        for (std::size_t u = 0; u < 3; ++u)
            units_.push_back(make_camu(rng, embed_dim_, cfg_.bottleneck, cfg_.weight));
    if (kind_ == VariantKind::avm_b)
        for (std::size_t c = 0; c + 1 < num_blocks_; ++c)
            cross_.push_back(make_camu(rng, embed_dim_, cfg_.bottleneck, cfg_.weight));
}

const CamuParams& Modulation::unit(std::size_t block, std::size_t slot) const {
    if (!enabled()) throw std::logic_error("modulation: plain variant has no units");
    if (block >= num_blocks_ || slot >= 3)
        throw std::out_of_range("modulation: unit(" + std::to_string(block) + ", " +
                                std::to_string(slot) + ")");
    const std::size_t t = kind_ == VariantKind::avm_s ? 0 : block;
    return units_[t * 3 + slot];
}

CamuParams& Modulation::unit_mut(std::size_t block, std::size_t slot) {
    return const_cast<CamuParams&>(unit(block, slot));
}

const CamuParams& Modulation::cross_unit(std::size_t idx) const {
    if (idx >= cross_.size()) throw std::out_of_range("modulation: cross unit " + std::to_string(idx));
    return cross_[idx];
}

void Modulation::zero_init(std::uint64_t seed) {
    Rng rng(seed);
    auto reset = [&](CamuParams& p) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(embed_dim_));
        for (auto& v : p.down_w.values()) v = rng.uniform(-bound, bound);
        for (auto& v : p.down_b.values()) v = 0.0;
        for (auto& v : p.up_w.values()) v = 0.0;
        for (auto& v : p.up_b.values()) v = 0.0;
    };
    for (auto& u : units_) reset(u);
    for (auto& c : cross_) reset(c);
}

std::size_t Modulation::variant_param_count(VariantKind kind, std::size_t d, std::size_t m,
                                            std::size_t num_blocks) {
    const std::size_t per = camu_param_count(d, m);
    switch (kind) {
        case VariantKind::plain: return 0;
        case VariantKind::avm: return 3 * num_blocks * per;
        case VariantKind::avm_s: return 3 * per;
        case VariantKind::avm_b: return (3 * num_blocks + num_blocks - 1) * per;
    }
    return 0;
}

std::vector<NamedParam> Modulation::named_params() const {
    std::vector<NamedParam> out;
    auto push = [&](const std::string& prefix, const CamuParams& p) {
        out.push_back({prefix + ".down_w", p.down_w});
        out.push_back({prefix + ".down_b", p.down_b});
        out.push_back({prefix + ".up_w", p.up_w});
        out.push_back({prefix + ".up_b", p.up_b});
    };
    if (kind_ == VariantKind::avm_s) {
        for (std::size_t u = 0; u < 3; ++u)
            push("mod.shared.camu" + std::to_string(u + 1), units_[u]);
    } else {
        for (std::size_t t = 0; t * 3 < units_.size(); ++t)
            for (std::size_t u = 0; u < 3; ++u)
                push("mod.block" + std::to_string(t) + ".camu" + std::to_string(u + 1),
                     units_[t * 3 + u]);
    }
    for (std::size_t c = 0; c < cross_.size(); ++c)
        push("mod.cross" + std::to_string(c + 1), cross_[c]);
    return out;
}

std::size_t Modulation::param_count() const {
    std::size_t n = 0;
    for (const auto& np : named_params()) n += np.tensor.numel();
    return n;
}

namespace {

void write_matrix(std::ofstream& f, const std::string& block, const std::string& unit,
                  const char* matrix, const Tensor& t) {
    const std::size_t cols = t.rank() == 2 ? t.shape()[1] : t.numel();
    auto vals = t.values();
    char buf[64];
    for (std::size_t i = 0; i < vals.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g", vals[i]);
        f << block << ',' << unit << ',' << matrix << ',' << i / cols << ',' << i % cols << ','
          << buf << '\n';
    }
}

void export_unit(const std::filesystem::path& path, const std::string& block,
                 const std::string& unit, const CamuParams& p) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("export_camu_weights: cannot write " + path.string());
    f << "block,unit,matrix,row,col,value\n";
    write_matrix(f, block, unit, "down", p.down_w);
    write_matrix(f, block, unit, "down_bias", p.down_b);
    write_matrix(f, block, unit, "up", p.up_w);
    write_matrix(f, block, unit, "up_bias", p.up_b);
}

}  // namespace

std::vector<std::string> Modulation::export_weights(const std::string& dir) const {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    std::vector<std::string> files;
    auto emit = [&](const std::string& name, const std::string& block, const std::string& unit,
                    const CamuParams& p) {
        fs::path path = fs::path(dir) / name;
        export_unit(path, block, unit, p);
        files.push_back(path.string());
    };
    if (kind_ == VariantKind::avm_s) {
        for (std::size_t u = 0; u < 3; ++u)
            emit("camu_shared_unit" + std::to_string(u + 1) + ".csv", "shared",
                 std::to_string(u + 1), units_[u]);
    } else {
        for (std::size_t t = 0; t * 3 < units_.size(); ++t)
            for (std::size_t u = 0; u < 3; ++u)
                emit("camu_block" + std::to_string(t) + "_unit" + std::to_string(u + 1) + ".csv",
                     std::to_string(t), std::to_string(u + 1), units_[t * 3 + u]);
    }
    for (std::size_t c = 0; c < cross_.size(); ++c)
        emit("camu_cross" + std::to_string(c + 1) + ".csv", std::to_string(c), "cross", cross_[c]);
    return files;
}

ModulatedBlockOut modulated_block_forward(const Backbone& backbone, const Modulation& mod,
                                          const Tensor& tokens, const Tensor& b,
                                          std::size_t block) {
    Tensor xb = add_rowvec(tokens, b);
    Tensor a = add(add(backbone.mha(backbone.maybe_ln1(xb, block), block), tokens),
                   camu_branch(tokens, mod.unit(block, 0)));
    Tensor mid = add(add(backbone.mlp(backbone.maybe_ln2(a, block), block), a),
                     camu_branch(a, mod.unit(block, 1)));
    // Insertion point 3 reads the block input, not the mid state.
    Tensor out = add(mid, camu_branch(tokens, mod.unit(block, 2)));
    return {a, mid, out};
}

Tensor variant_forward(const Backbone& backbone, const Modulation& mod, const Tensor& image,
                       const Tensor& behavior) {
    if (!mod.enabled()) return backbone.forward(image, behavior);
    const auto& cfg = backbone.config();
    Tensor x = backbone.patch_embed(image);
    Tensor b = Tensor::zeros({cfg.embed_dim});
    Tensor prev_input;  // input of the previous block, feeds AVM-B cross units
    for (std::size_t i = 0; i < cfg.num_blocks; ++i) {
        b = backbone.behavior_embed(behavior, b, i);
        Tensor out = modulated_block_forward(backbone, mod, x, b, i).out;
        if (mod.kind() == VariantKind::avm_b && i >= 1)
            out = add(out, camu_branch(prev_input, mod.cross_unit(i - 1)));
        prev_input = x;
        x = out;
    }
    return reshape(x, {cfg.grid_h(), cfg.grid_w(), cfg.embed_dim});
}

}  // namespace avm
