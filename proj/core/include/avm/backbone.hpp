#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "avm/rng.hpp"
#include "avm/tensor.hpp"

namespace avm {

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct BackboneConfig {
    std::size_t image_h = 36;
    std::size_t image_w = 64;
    std::size_t patch = 4;
    std::size_t embed_dim = 64;
    std::size_t num_blocks = 4;
    std::size_t num_heads = 4;
    std::size_t behavior_dim = 5;
    bool layernorm_enabled = false;

    std::size_t grid_h() const { return image_h / patch; }
    std::size_t grid_w() const { return image_w / patch; }
    std::size_t num_tokens() const { return grid_h() * grid_w(); }
    void validate() const;
};

// exact trainable-parameter count implied by a config
std::size_t backbone_param_count(const BackboneConfig& cfg);

struct BlockParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;   // d -> 4d -> d
    Tensor beh_w1, beh_b1, beh_w2, beh_b2;   // behavior_dim -> d -> d
    Tensor ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;  // present iff layernorm_enabled
};

struct NamedParam {
    std::string name;
    Tensor tensor;
};

// The shared-representation path. Owns its parameters; forward methods build
// graph nodes against whatever tape is active.
class Backbone {
public:
    Backbone(BackboneConfig cfg, std::uint64_t seed);

    const BackboneConfig& config() const { return cfg_; }

    // image [H x W] -> patch tokens + learned positional embedding, [T x d]
    Tensor patch_embed(const Tensor& image) const;

    // b = b_prev + behavior-MLP_block(raw); raw is the untouched behavior vector
    Tensor behavior_embed(const Tensor& raw, const Tensor& b_prev, std::size_t block) const;

    Tensor mha(const Tensor& tokens, std::size_t block) const;
    Tensor mlp(const Tensor& tokens, std::size_t block) const;
    Tensor maybe_ln1(const Tensor& tokens, std::size_t block) const;
    Tensor maybe_ln2(const Tensor& tokens, std::size_t block) const;

    struct BlockOut {
        Tensor attn_state;  // a
        Tensor out;         // f
    };
    BlockOut block_forward(const Tensor& tokens, const Tensor& b, std::size_t block) const;

    // full plain forward; output reshaped to the spatial feature map [H' x W' x d]
    Tensor forward(const Tensor& image, const Tensor& behavior) const;

    BlockParams& block(std::size_t i) { return blocks_[i]; }
    const BlockParams& block(std::size_t i) const { return blocks_[i]; }
    Tensor& patch_weight() { return patch_w_; }
    Tensor& patch_bias() { return patch_b_; }
    Tensor& pos_embedding() { return pos_; }

    std::vector<NamedParam> named_params() const;
    std::size_t param_count() const;

private:
    BackboneConfig cfg_;
    Tensor patch_w_, patch_b_, pos_;
    std::vector<BlockParams> blocks_;
};

// data rearrangement only; the result is a constant leaf
Tensor patchify(const Tensor& image, const BackboneConfig& cfg);

// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weight initialization
Tensor init_weight(Rng& rng, std::size_t fan_in, Shape shape);

}  // namespace avm
