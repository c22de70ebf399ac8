#include "avm/backbone.hpp"

#include <cmath>
#include <stdexcept>

namespace avm {

void BackboneConfig::validate() const {
    if (patch == 0 || image_h % patch != 0 || image_w % patch != 0)
        throw ConfigError("backbone: image " + std::to_string(image_h) + "x" +
                          std::to_string(image_w) + " not divisible by patch " +
                          std::to_string(patch));
    if (num_heads == 0 || embed_dim % num_heads != 0)
        throw ConfigError("backbone: embed_dim " + std::to_string(embed_dim) +
                          " not divisible by num_heads " + std::to_string(num_heads));
    if (num_blocks < 1) throw ConfigError("backbone: num_blocks must be >= 1");
    if (behavior_dim < 1) throw ConfigError("backbone: behavior_dim must be >= 1");
}

std::size_t backbone_param_count(const BackboneConfig& cfg) {
    const std::size_t d = cfg.embed_dim;
    const std::size_t patch_vec = cfg.patch * cfg.patch;
    std::size_t per_block = 4 * (d * d + d)                       // q, k, v, o
                            + (d * 4 * d + 4 * d) + (4 * d * d + d)  // mlp
                            + (cfg.behavior_dim * d + d) + (d * d + d);  // behavior mlp
    if (cfg.layernorm_enabled) per_block += 4 * d;
    return patch_vec * d + d                 // patch projection
           + cfg.num_tokens() * d            // positional embedding
           + cfg.num_blocks * per_block;
}

Tensor init_weight(Rng& rng, std::size_t fan_in, Shape shape) {
    Tensor t = Tensor::leaf(std::move(shape), true);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : t.values()) v = rng.uniform(-bound, bound);
    return t;
}

Tensor patchify(const Tensor& image, const BackboneConfig& cfg) {
    if (image.rank() != 2 || image.shape()[0] != cfg.image_h || image.shape()[1] != cfg.image_w)
        throw ConfigError("patch_embed: image shape " + shape_str(image.shape()) +
                          " does not match configured " + std::to_string(cfg.image_h) + "x" +
                          std::to_string(cfg.image_w));
    const std::size_t p = cfg.patch, gw = cfg.grid_w(), gh = cfg.grid_h();
    Tensor patches = Tensor::leaf({gh * gw, p * p});
    auto out = patches.values();
    auto in = image.values();
    for (std::size_t gy = 0; gy < gh; ++gy)
        for (std::size_t gx = 0; gx < gw; ++gx) {
            double* dst = out.data() + (gy * gw + gx) * p * p;
            for (std::size_t py = 0; py < p; ++py)
                for (std::size_t px = 0; px < p; ++px)
                    dst[py * p + px] = in[(gy * p + py) * cfg.image_w + gx * p + px];
        }
    return patches;
}

Backbone::Backbone(BackboneConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const std::size_t d = cfg_.embed_dim, bd = cfg_.behavior_dim;
    const std::size_t patch_vec = cfg_.patch * cfg_.patch;

    patch_w_ = init_weight(rng, patch_vec, {patch_vec, d});
    patch_b_ = Tensor::zeros({d}, true);
    pos_ = init_weight(rng, d, {cfg_.num_tokens(), d});

    blocks_.resize(cfg_.num_blocks);
    for (auto& blk : blocks_) {
        blk.wq = init_weight(rng, d, {d, d});
        blk.bq = Tensor::zeros({d}, true);
        blk.wk = init_weight(rng, d, {d, d});
        blk.bk = Tensor::zeros({d}, true);
        blk.wv = init_weight(rng, d, {d, d});
        blk.bv = Tensor::zeros({d}, true);
        blk.wo = init_weight(rng, d, {d, d});
        blk.bo = Tensor::zeros({d}, true);
        blk.mlp_w1 = init_weight(rng, d, {d, 4 * d});
        blk.mlp_b1 = Tensor::zeros({4 * d}, true);
        blk.mlp_w2 = init_weight(rng, 4 * d, {4 * d, d});
        blk.mlp_b2 = Tensor::zeros({d}, true);
        blk.beh_w1 = init_weight(rng, bd, {bd, d});
        blk.beh_b1 = Tensor::zeros({d}, true);
        blk.beh_w2 = init_weight(rng, d, {d, d});
        blk.beh_b2 = Tensor::zeros({d}, true);
        if (cfg_.layernorm_enabled) {
            blk.ln1_gamma = Tensor::full({d}, 1.0, true);
            blk.ln1_beta = Tensor::zeros({d}, true);
            blk.ln2_gamma = Tensor::full({d}, 1.0, true);
            blk.ln2_beta = Tensor::zeros({d}, true);
        }
    }
}

Tensor Backbone::patch_embed(const Tensor& image) const {
    Tensor patches = patchify(image, cfg_);
    return add(add_rowvec(matmul(patches, patch_w_), patch_b_), pos_);
}

Tensor Backbone::behavior_embed(const Tensor& raw, const Tensor& b_prev, std::size_t block) const {
    if (block >= cfg_.num_blocks)
        throw std::out_of_range("behavior_embed: block " + std::to_string(block));
    const auto& blk = blocks_[block];
    Tensor r = reshape(raw, {1, cfg_.behavior_dim});
    Tensor h = relu(add_rowvec(matmul(r, blk.beh_w1), blk.beh_b1));
    Tensor out = add_rowvec(matmul(h, blk.beh_w2), blk.beh_b2);
    return add(b_prev, reshape(out, {cfg_.embed_dim}));
}

Tensor Backbone::mha(const Tensor& tokens, std::size_t block) const {
    const auto& blk = blocks_[block];
    const std::size_t heads = cfg_.num_heads;
    const std::size_t dh = cfg_.embed_dim / heads;
    Tensor q = add_rowvec(matmul(tokens, blk.wq), blk.bq);
    Tensor k = add_rowvec(matmul(tokens, blk.wk), blk.bk);
    Tensor v = add_rowvec(matmul(tokens, blk.wv), blk.bv);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> head_out;
    head_out.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, dh);
        Tensor kh = slice_cols(k, h * dh, dh);
        Tensor vh = slice_cols(v, h * dh, dh);
        Tensor attn = softmax_lastdim(mul_scalar(matmul(qh, transpose(kh)), scale));
        head_out.push_back(matmul(attn, vh));
    }
    Tensor cat = heads == 1 ? head_out[0] : concat_cols(head_out);
    return add_rowvec(matmul(cat, blk.wo), blk.bo);
}

Tensor Backbone::mlp(const Tensor& tokens, std::size_t block) const {
    const auto& blk = blocks_[block];
    Tensor h = relu(add_rowvec(matmul(tokens, blk.mlp_w1), blk.mlp_b1));
    return add_rowvec(matmul(h, blk.mlp_w2), blk.mlp_b2);
}

Tensor Backbone::maybe_ln1(const Tensor& tokens, std::size_t block) const {
    if (!cfg_.layernorm_enabled) return tokens;
    const auto& blk = blocks_[block];
    return layer_norm_rows(tokens, blk.ln1_gamma, blk.ln1_beta);
}

Tensor Backbone::maybe_ln2(const Tensor& tokens, std::size_t block) const {
    if (!cfg_.layernorm_enabled) return tokens;
    const auto& blk = blocks_[block];
    return layer_norm_rows(tokens, blk.ln2_gamma, blk.ln2_beta);
}

Backbone::BlockOut Backbone::block_forward(const Tensor& tokens, const Tensor& b,
                                           std::size_t block) const {
    Tensor xb = add_rowvec(tokens, b);
    Tensor a = add(mha(maybe_ln1(xb, block), block), tokens);
    Tensor f = add(mlp(maybe_ln2(a, block), block), a);
    return {a, f};
}

Tensor Backbone::forward(const Tensor& image, const Tensor& behavior) const {
    Tensor x = patch_embed(image);
    Tensor b = Tensor::zeros({cfg_.embed_dim});
    for (std::size_t i = 0; i < cfg_.num_blocks; ++i) {
        b = behavior_embed(behavior, b, i);
        x = block_forward(x, b, i).out;
    }
    return reshape(x, {cfg_.grid_h(), cfg_.grid_w(), cfg_.embed_dim});
}

std::vector<NamedParam> Backbone::named_params() const {
    std::vector<NamedParam> out;
    out.push_back({"backbone.patch.weight", patch_w_});
    out.push_back({"backbone.patch.bias", patch_b_});
    out.push_back({"backbone.pos", pos_});
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const auto& blk = blocks_[i];
        const std::string p = "backbone.block" + std::to_string(i);
        out.push_back({p + ".attn.wq", blk.wq});
        out.push_back({p + ".attn.bq", blk.bq});
        out.push_back({p + ".attn.wk", blk.wk});
        out.push_back({p + ".attn.bk", blk.bk});
        out.push_back({p + ".attn.wv", blk.wv});
        out.push_back({p + ".attn.bv", blk.bv});
        out.push_back({p + ".attn.wo", blk.wo});
        out.push_back({p + ".attn.bo", blk.bo});
        out.push_back({p + ".mlp.w1", blk.mlp_w1});
        out.push_back({p + ".mlp.b1", blk.mlp_b1});
        out.push_back({p + ".mlp.w2", blk.mlp_w2});
        out.push_back({p + ".mlp.b2", blk.mlp_b2});
        out.push_back({p + ".behavior.w1", blk.beh_w1});
        out.push_back({p + ".behavior.b1", blk.beh_b1});
        out.push_back({p + ".behavior.w2", blk.beh_w2});
        out.push_back({p + ".behavior.b2", blk.beh_b2});
        if (cfg_.layernorm_enabled) {
            out.push_back({p + ".ln1.gamma", blk.ln1_gamma});
            out.push_back({p + ".ln1.beta", blk.ln1_beta});
            out.push_back({p + ".ln2.gamma", blk.ln2_gamma});
            out.push_back({p + ".ln2.beta", blk.ln2_beta});
        }
    }
    return out;
}

std::size_t Backbone::param_count() const {
    std::size_t n = 0;
    for (const auto& np : named_params()) n += np.tensor.numel();
    return n;
}

}  // namespace avm
