#pragma once

#include <memory>

#include "spda/nn.hpp"

namespace spda {

// One alignment branch: deconv -> layernorm -> GELU -> deconv, mapping an
// encoder-resolution map (C, h, w) to the decoder's upscaled-feature space
// (C_dec, 4h, 4w).
struct FeatureAlign {
    ConvT2d de1;      // C -> C_dec, stride 2
    LayerNorm2d ln;
    ConvT2d de2;      // C_dec -> C_dec, stride 2

    void init(int in_c, int out_c, Rng& rng);
    Var fwd(Graph& g, Var x) const;
    void collect(const std::string& prefix, ParamList& out);
};

// Builds the semantic prompt: fuse encoder semantics into the decoder's
// internal features, modulate per channel, then downscale to the dense-prompt
// grid.
struct SemanticPromptBranch {
    FeatureAlign align_low, align_high;
    Conv2d att1;        // 1x1
    LayerNorm2d att_ln;
    Conv2d att2;        // 1x1
    Conv2d down1;       // 2x2 stride 2, C_dec -> 2*C_dec
    Conv2d down2;       // 2x2 stride 2, 2*C_dec -> C_p
    int dec_dim = 0, prompt_dim = 0;

    void init(int encoder_c, int dec_dim, int prompt_dim, Rng& rng);
    // low: backbone tap at block 2; high: fine fusion 4 RGB output.
    Var align_features(Graph& g, Var low, Var high) const;
    // Fused + channel-modulated tensor, before the strided downsampling.
    Var enhance_modulated(Graph& g, Var f_src, Var f_sem) const;
    Var enhance_prompt(Graph& g, Var f_src, Var f_sem) const;
    void collect(const std::string& prefix, ParamList& out);
};

// Encodes a coarse foreground probability map into the spatial prompt.
struct SpatialPromptBranch {
    Conv2d me1;  // 2x2 stride 2, 1 -> c1
    LayerNorm2d ln1;
    Conv2d me2;  // 2x2 stride 2, c1 -> c2
    LayerNorm2d ln2;
    Conv2d proj;  // 1x1 -> C_p

    void init(int prompt_dim, Rng& rng);
    Var encode_mask(Graph& g, Var prob_map) const;  // values must lie in [0,1]
    void collect(const std::string& prefix, ParamList& out);
};

// Concatenate + 1x1 conv, then channel attention from GAP.
struct PromptFusion {
    Conv2d fuse_conv;  // 1x1, 2*C_p -> C_p
    Linear fa1, fa2;   // the two 1x1 convs of the attention path on pooled features

    void init(int prompt_dim, Rng& rng);
    Var fuse_prompts(Graph& g, Var p_semantic, Var p_spatial) const;
    void collect(const std::string& prefix, ParamList& out);
};

// Assembled module. Branches exist only when the corresponding prompt is
// enabled, so ablation configs carry no dead parameters.
struct SSSPM {
    std::unique_ptr<SemanticPromptBranch> semantic;
    std::unique_ptr<SpatialPromptBranch> spatial;
    std::unique_ptr<PromptFusion> fusion;  // present iff both branches are

    void init(bool use_semantic, bool use_spatial, int encoder_c, int dec_dim, int prompt_dim,
              Rng& rng);
    bool any() const { return semantic != nullptr || spatial != nullptr; }
    void collect(const std::string& prefix, ParamList& out);
};

}  // namespace spda
