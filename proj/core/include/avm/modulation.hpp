#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "avm/backbone.hpp"
#include "avm/tensor.hpp"

namespace avm {

enum class VariantKind { plain, avm, avm_s, avm_b };

const char* variant_name(VariantKind k);
VariantKind variant_from_name(const std::string& name);  // "avm", "avm-s", "avm-b", "plain"

struct CamuConfig {
    std::size_t bottleneck = 31;  // m
    double weight = 1.0;          // modulation strength, scales the branch only
};

// One bottleneck unit: down [d x m] + bias, up [m x d] + bias.
struct CamuParams {
    Tensor down_w, down_b;
    Tensor up_w, up_b;
    double weight = 1.0;
};

// The unit itself: x + w * Up(ReLU(Down(x))), per token.
Tensor camu_forward(const Tensor& x, const CamuParams& p);

// The bottleneck branch alone, w * Up(ReLU(Down(x))). This is what the block
// wiring adds at each insertion point; the unit's skip term is the block's own
// residual, which keeps zero-initialized modulation an exact identity.
Tensor camu_branch(const Tensor& x, const CamuParams& p);

std::size_t camu_param_count(std::size_t d, std::size_t m);

// Holds every CAMU of a variant: three per block (AVM, AVM-B), one shared
// triplet (AVM-S), plus L-1 cross units (AVM-B).
class Modulation {
public:
    Modulation(VariantKind kind, const BackboneConfig& backbone, CamuConfig cfg,
               std::uint64_t seed);

    VariantKind kind() const { return kind_; }
    bool enabled() const { return kind_ != VariantKind::plain; }
    const CamuConfig& config() const { return cfg_; }
    std::size_t num_blocks() const { return num_blocks_; }
    std::size_t num_cross() const { return cross_.size(); }

    // the triplet wired into `block`; slot is the insertion point 0..2
    const CamuParams& unit(std::size_t block, std::size_t slot) const;
    CamuParams& unit_mut(std::size_t block, std::size_t slot);
    const CamuParams& cross_unit(std::size_t idx) const;
    CamuParams& cross_unit_mut(std::size_t idx) { return cross_[idx]; }

    // up projections and biases zeroed, down re-randomized: the modulated
    // forward becomes bit-identical to the plain backbone
    void zero_init(std::uint64_t seed);

    std::vector<NamedParam> named_params() const;
    std::size_t param_count() const;
    static std::size_t variant_param_count(VariantKind kind, std::size_t d, std::size_t m,
                                           std::size_t num_blocks);

    // one CSV per unit under dir; header block,unit,matrix,row,col,value
    std::vector<std::string> export_weights(const std::string& dir) const;

private:
    VariantKind kind_;
    CamuConfig cfg_;
    std::size_t embed_dim_;
    std::size_t num_blocks_;
    std::vector<CamuParams> units_;  // 3 per block, or 3 shared
    std::vector<CamuParams> cross_;
};

struct ModulatedBlockOut {
    Tensor attn_state;  // a, after insertion point 1
    Tensor mid;         // f before the third insertion
    Tensor out;         // f
};

// a = MHA(x+b) + x + CAMU1(x); f_mid = MLP(a) + a + CAMU2(a); f = f_mid + CAMU3(x)
ModulatedBlockOut modulated_block_forward(const Backbone& backbone, const Modulation& mod,
                                          const Tensor& tokens, const Tensor& b,
                                          std::size_t block);

// full forward under the variant wiring; plain kind falls back to the backbone
Tensor variant_forward(const Backbone& backbone, const Modulation& mod, const Tensor& image,
                       const Tensor& behavior);

}  // namespace avm
