#include "spda/ssspm.hpp"

#include <algorithm>

#include "spda/errors.hpp"

namespace spda {

void FeatureAlign::init(int in_c, int out_c, Rng& rng) {
    de1.init(in_c, out_c, 2, 2, rng);
    ln.init(out_c);
    de2.init(out_c, out_c, 2, 2, rng);
}

Var FeatureAlign::fwd(Graph& g, Var x) const {
    Var h = de1.fwd(g, x);
    h = ln.fwd(g, h);
    h = g.gelu(h);
    return de2.fwd(g, h);
}

void FeatureAlign::collect(const std::string& prefix, ParamList& out) {
    de1.collect(prefix + ".de1", out);
    ln.collect(prefix + ".ln", out);
    de2.collect(prefix + ".de2", out);
}

void SemanticPromptBranch::init(int encoder_c, int dec_dim_, int prompt_dim_, Rng& rng) {
    dec_dim = dec_dim_;
    prompt_dim = prompt_dim_;
    align_low.init(encoder_c, dec_dim, rng);
    align_high.init(encoder_c, dec_dim, rng);
    att1.init(dec_dim, dec_dim, 1, 1, 0, rng);
    att_ln.init(dec_dim);
    att2.init(dec_dim, dec_dim, 1, 1, 0, rng);
    down1.init(dec_dim, 2 * dec_dim, 2, 2, 0, rng);
    down2.init(2 * dec_dim, prompt_dim, 2, 2, 0, rng);
}

Var SemanticPromptBranch::align_features(Graph& g, Var low, Var high) const {
    Var a = align_low.fwd(g, low);
    Var b = align_high.fwd(g, high);
    const Tensor& ta = g.value(a);
    const Tensor& tb = g.value(b);
    if (ta.shape != tb.shape)
        throw ShapeError("align_features: branch outputs disagree, " + shape_str(ta.shape) +
                         " vs " + shape_str(tb.shape));
    return g.add(a, b);
}

Var SemanticPromptBranch::enhance_modulated(Graph& g, Var f_src, Var f_sem) const {
    const Tensor& ts = g.value(f_src);
    const Tensor& tm = g.value(f_sem);
    if (ts.shape != tm.shape)
        throw ShapeError("enhance_prompt: F_Src " + shape_str(ts.shape) + " vs F_Sem " +
                         shape_str(tm.shape) +
                         "; re-run align_features at the matching scale");
    Var fused = g.add(f_src, f_sem);
    Var a = att1.fwd(g, fused);
    a = att_ln.fwd(g, a);
    a = g.relu(a);
    a = att2.fwd(g, a);
    Var attn = g.sigmoid(g.gap2d(a));  // one scalar per channel
    return g.mul_channel(fused, attn);
}

Var SemanticPromptBranch::enhance_prompt(Graph& g, Var f_src, Var f_sem) const {
    Var m = enhance_modulated(g, f_src, f_sem);
    Var d = g.gelu(down1.fwd(g, m));
    return down2.fwd(g, d);
}

void SemanticPromptBranch::collect(const std::string& prefix, ParamList& out) {
    align_low.collect(prefix + ".align_low", out);
    align_high.collect(prefix + ".align_high", out);
    att1.collect(prefix + ".att1", out);
    att_ln.collect(prefix + ".att_ln", out);
    att2.collect(prefix + ".att2", out);
    down1.collect(prefix + ".down1", out);
    down2.collect(prefix + ".down2", out);
}

void SpatialPromptBranch::init(int prompt_dim, Rng& rng) {
    int c1 = std::max(4, prompt_dim / 4);
    me1.init(1, c1, 2, 2, 0, rng);
    ln1.init(c1);
    me2.init(c1, prompt_dim, 2, 2, 0, rng);
    ln2.init(prompt_dim);
    proj.init(prompt_dim, prompt_dim, 1, 1, 0, rng);
}

Var SpatialPromptBranch::encode_mask(Graph& g, Var prob_map) const {
    const Tensor& p = g.value(prob_map);
    if (p.rank() != 4 || p.dim(1) != 1)
        throw ShapeError("encode_mask: expected (B,1,S,S) probability map, got " +
                         shape_str(p.shape));
    for (double v : p.data)
        if (v < 0.0 || v > 1.0)
            throw ConfigError(
                "encode_mask: input must be a probability map in [0,1]; apply the logistic map to "
                "logits first");
    Var h = me1.fwd(g, prob_map);
    h = g.gelu(ln1.fwd(g, h));
    h = me2.fwd(g, h);
    h = g.gelu(ln2.fwd(g, h));
    return proj.fwd(g, h);
}

void SpatialPromptBranch::collect(const std::string& prefix, ParamList& out) {
    me1.collect(prefix + ".me1", out);
    ln1.collect(prefix + ".ln1", out);
    me2.collect(prefix + ".me2", out);
    ln2.collect(prefix + ".ln2", out);
    proj.collect(prefix + ".proj", out);
}

void PromptFusion::init(int prompt_dim, Rng& rng) {
    fuse_conv.init(2 * prompt_dim, prompt_dim, 1, 1, 0, rng);
    fa1.init(prompt_dim, prompt_dim, rng);
    fa2.init(prompt_dim, prompt_dim, rng);
}

Var PromptFusion::fuse_prompts(Graph& g, Var p_semantic, Var p_spatial) const {
    const Tensor& ta = g.value(p_semantic);
    const Tensor& tb = g.value(p_spatial);
    if (ta.shape != tb.shape)
        throw ShapeError("fuse_prompts: semantic " + shape_str(ta.shape) + " vs spatial " +
                         shape_str(tb.shape));
    Var fused = fuse_conv.fwd(g, g.concat2(p_semantic, p_spatial, 1));
    Var pooled = g.gap2d(fused);  // (B, C_p)
    Var attn = g.sigmoid(fa2.fwd(g, g.relu(fa1.fwd(g, pooled))));
    return g.mul_channel(fused, attn);
}

void PromptFusion::collect(const std::string& prefix, ParamList& out) {
    fuse_conv.collect(prefix + ".fuse", out);
    fa1.collect(prefix + ".fa1", out);
    fa2.collect(prefix + ".fa2", out);
}

void SSSPM::init(bool use_semantic, bool use_spatial, int encoder_c, int dec_dim, int prompt_dim,
                 Rng& rng) {
    if (use_semantic) {
        semantic = std::make_unique<SemanticPromptBranch>();
        semantic->init(encoder_c, dec_dim, prompt_dim, rng);
    }
    if (use_spatial) {
        spatial = std::make_unique<SpatialPromptBranch>();
        spatial->init(prompt_dim, rng);
    }
    if (use_semantic && use_spatial) {
        fusion = std::make_unique<PromptFusion>();
        fusion->init(prompt_dim, rng);
    }
}

void SSSPM::collect(const std::string& prefix, ParamList& out) {
    if (semantic) semantic->collect(prefix + ".semantic", out);
    if (spatial) spatial->collect(prefix + ".spatial", out);
    if (fusion) fusion->collect(prefix + ".fusion", out);
}

}  // namespace spda
