#pragma once

#include <array>
#include <utility>

#include "spda/backbone.hpp"
#include "spda/nn.hpp"

namespace spda {

// Depth-gated coarse fusion: the depth stream is downsampled, passed through a
// dilated conv + ReLU + 1x1 projection, upsampled back and squashed to a
// sigmoid gate that modulates the RGB stream residually.
struct CoarseFusion {
    Conv2d dilated;  // 3x3, dilation d, channel-preserving
    Conv2d proj;     // 1x1, C -> C (must match the RGB channels for the gate)
    int down_factor = 2;

    void init(int channels, int down_factor, int dilation, Rng& rng);
    Var fwd(Graph& g, Var f_rgb, Var f_depth) const;
    // The gate alone (before modulation); shares the forward path.
    Var gate(Graph& g, Var f_depth, int out_h, int out_w) const;
    void collect(const std::string& prefix, ParamList& out);
};

// One direction of a fine fusion block: query projection on one stream, key
// and value projections on the other, softmax(QK^T/sqrt(d_k))V per head.
struct CrossAttentionParams {
    Linear wq, wk, wv;   // bias-free C x C projections
    Linear out_proj;     // optional, off by default
    bool use_out_proj = false;

    void init(int channels, bool out_proj, Rng& rng);
    void collect(const std::string& prefix, ParamList& out);
};

struct FineFusion {
    CrossAttentionParams rgb_query;    // RGB as query, depth as key/value
    CrossAttentionParams depth_query;  // depth as query, RGB as key/value
    int heads = 4;

    void init(int channels, int heads, bool out_proj, Rng& rng);
    // Returns (fused RGB, fused depth), both (B, C, H, W).
    std::pair<Var, Var> fwd(Graph& g, Var f_rgb, Var f_depth) const;
    void collect(const std::string& prefix, ParamList& out);
};

// The full module wired as a FusionHandle: one coarse block, four fine blocks.
struct C2FFM final : FusionHandle {
    CoarseFusion coarse;
    std::array<FineFusion, 4> fine;

    void init(int channels, int heads, Rng& rng, int down_factor = 2, int dilation = 2,
              bool out_proj = false);
    Var coarse_fuse(Graph& g, Var f_rgb, Var f_depth) override;
    std::pair<Var, Var> fine_fuse(Graph& g, int stage, Var f_rgb, Var f_depth) override;
    void collect(const std::string& prefix, ParamList& out);
};

}  // namespace spda
