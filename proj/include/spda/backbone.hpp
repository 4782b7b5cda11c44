#pragma once

#include <map>
#include <memory>
#include <utility>
#include <vector>

#include "spda/nn.hpp"

namespace spda {

struct BackboneConfig {
    int image_size = 64;   // square input, pixels
    int patch_size = 8;
    int embed_dim = 96;
    int depth = 12;        // transformer block count
    int heads = 4;
    int lora_rank = 4;     // 0 disables adapters
    double lora_alpha = 4.0;
    bool freeze_base = false;
    int mlp_ratio = 4;

    int grid() const { return image_size / patch_size; }
    void validate() const;  // throws ConfigError
};

// Fusion stages sit after these (1-based) blocks; coarse fusion follows patch
// embedding. Fixed wiring: one coarse block, four fine blocks.
inline constexpr int kFineFusionBlocks[4] = {2, 5, 8, 11};

// Rank-r adapter on a (C, C) projection: effective weight = w + (alpha/r) * a.b
// with `a` (C, r) normal-init and `b` (r, C) zero-init, so a fresh adapter is
// an exact identity delta.
struct LoraAdapter {
    ParamTensor a, b;
    int rank = 0;
    double alpha = 0.0;

    void init(int c, int rank, double alpha, Rng& rng);
    bool enabled() const { return rank > 0; }
    // Returns the adapted weight var for the given base weight var.
    Var adapt(Graph& g, Var w) const;
    void collect(const std::string& prefix, ParamList& out);
};

// Pre-norm ViT block with LoRA on the query and value projections.
struct TransformerBlock {
    LayerNorm ln1, ln2;
    Linear wq, wk, wv, wo;
    LoraAdapter lora_q, lora_v;
    Mlp mlp;
    int heads = 4;

    void init(const BackboneConfig& cfg, Rng& rng);
    Var fwd_tokens(Graph& g, Var x) const;  // (B, N, C) -> (B, N, C)
    Var fwd_map(Graph& g, Var x) const;     // (B, C, H, W) -> (B, C, H, W)
    void collect(const std::string& prefix, ParamList& out);
};

struct PatchEmbed {
    Conv2d proj;      // kernel p, stride p, 3 -> C
    ParamTensor pos;  // (1, C, g, g) learned positional term
    int image_size = 0, patch_size = 0, embed_dim = 0;

    void init(const BackboneConfig& cfg, Rng& rng);
    Var fwd(Graph& g, Var image) const;  // (B, 3, S, S) -> (B, C, g, g)
    void collect(const std::string& prefix, ParamList& out);
};

// How the encoder talks to the fusion module; tests substitute identity or
// instrumented handles here.
struct FusionHandle {
    virtual ~FusionHandle() = default;
    virtual Var coarse_fuse(Graph& g, Var f_rgb, Var f_depth) = 0;
    // stage in [0, 4): fine fusion block index
    virtual std::pair<Var, Var> fine_fuse(Graph& g, int stage, Var f_rgb, Var f_depth) = 0;
};

struct IdentityFusion final : FusionHandle {
    Var coarse_fuse(Graph&, Var f_rgb, Var) override { return f_rgb; }
    std::pair<Var, Var> fine_fuse(Graph&, int, Var f_rgb, Var f_depth) override {
        return {f_rgb, f_depth};
    }
};

struct ViTPath {
    PatchEmbed embed;
    std::vector<TransformerBlock> blocks;

    void init(const BackboneConfig& cfg, Rng& rng);
    void collect(const std::string& prefix, ParamList& out);
};

struct EncoderOutput {
    Var final_rgb = Graph::kNoVar;       // (B, C_dec, g, g) after the 1x1 neck
    Var tap_block2_rgb = Graph::kNoVar;  // RGB stream after block 2, pre-fusion
    Var tap_fine4_rgb = Graph::kNoVar;   // RGB-side output of fine fusion 4
    // Retained stage taps (block index -> pre-fusion stream; 0 = patch embed).
    std::map<int, Var> rgb_taps, depth_taps;
};

struct DualPathEncoder {
    BackboneConfig cfg;
    ViTPath rgb_path, depth_path;
    Conv2d neck;  // 1x1, C -> decoder width
    int decoder_dim = 0;

    void init(const BackboneConfig& cfg, int decoder_dim, Rng& rng);
    // fusion may be null only when use_fusion is false; then only the RGB path
    // runs (the "w/o C2FFM" wiring) and taps come from the plain RGB stream.
    EncoderOutput run(Graph& g, Var rgb, Var depth3, FusionHandle* fusion, bool use_fusion) const;
    void collect(const std::string& prefix, ParamList& out);
};

}  // namespace spda
