#include "spda/c2ffm.hpp"

#include <cmath>

#include "spda/errors.hpp"

namespace spda {

void CoarseFusion::init(int channels, int down_factor_, int dilation, Rng& rng) {
    down_factor = down_factor_;
    dilated.init(channels, channels, 3, 1, dilation, rng, dilation);
    proj.init(channels, channels, 1, 1, 0, rng);
}

Var CoarseFusion::gate(Graph& g, Var f_depth, int out_h, int out_w) const {
    Var d = g.avg_pool2d(f_depth, down_factor);
    d = dilated.fwd(g, d);
    d = g.relu(d);
    d = proj.fwd(g, d);
    d = g.upsample_bilinear(d, out_h, out_w);
    return g.sigmoid(d);
}

Var CoarseFusion::fwd(Graph& g, Var f_rgb, Var f_depth) const {
    const Tensor& tr = g.value(f_rgb);
    const Tensor& td = g.value(f_depth);
    if (tr.shape != td.shape)
        throw ShapeError("coarse_fuse: RGB features " + shape_str(tr.shape) +
                         " vs depth features " + shape_str(td.shape));
    if (tr.dim(2) % down_factor != 0 || tr.dim(3) % down_factor != 0)
        throw ShapeError("coarse_fuse: spatial size " + shape_str(tr.shape) +
                         " not divisible by down factor " + std::to_string(down_factor));
    Var attn = gate(g, f_depth, tr.dim(2), tr.dim(3));
    return g.add(f_rgb, g.mul(attn, f_rgb));
}

void CoarseFusion::collect(const std::string& prefix, ParamList& out) {
    dilated.collect(prefix + ".dilated", out);
    proj.collect(prefix + ".proj", out);
}

void CrossAttentionParams::init(int channels, bool out_proj_, Rng& rng) {
    use_out_proj = out_proj_;
    // The fusion output replaces the stream (no residual), so the projections
    // must preserve token scale and keep the attention scores informative;
    // a tiny init collapses every token onto the mean and stalls gradients.
    double std = 1.0 / std::sqrt(static_cast<double>(channels));
    wq.init(channels, channels, rng, std, /*bias=*/false);
    wk.init(channels, channels, rng, std, /*bias=*/false);
    wv.init(channels, channels, rng, std, /*bias=*/false);
    if (use_out_proj) out_proj.init(channels, channels, rng, std);
}

void CrossAttentionParams::collect(const std::string& prefix, ParamList& out) {
    wq.collect(prefix + ".wq", out);
    wk.collect(prefix + ".wk", out);
    wv.collect(prefix + ".wv", out);
    if (use_out_proj) out_proj.collect(prefix + ".out", out);
}

void FineFusion::init(int channels, int heads_, bool out_proj, Rng& rng) {
    heads = heads_;
    if (channels % heads != 0)
        throw ConfigError("fine fusion: channels " + std::to_string(channels) +
                          " not divisible by heads " + std::to_string(heads));
    rgb_query.init(channels, out_proj, rng);
    depth_query.init(channels, out_proj, rng);
}

namespace {
Var cross_direction(Graph& g, const CrossAttentionParams& p, Var q_tokens, Var kv_tokens,
                    int heads) {
    Var q = p.wq.fwd(g, q_tokens);
    Var k = p.wk.fwd(g, kv_tokens);
    Var v = p.wv.fwd(g, kv_tokens);
    Var out = multihead_attention(g, q, k, v, heads);
    if (p.use_out_proj) out = p.out_proj.fwd(g, out);
    return out;
}
}  // namespace

std::pair<Var, Var> FineFusion::fwd(Graph& g, Var f_rgb, Var f_depth) const {
    const Tensor& tr = g.value(f_rgb);
    const Tensor& td = g.value(f_depth);
    if (tr.shape != td.shape)
        throw ShapeError("fine_fuse: RGB features " + shape_str(tr.shape) + " vs depth features " +
                         shape_str(td.shape));
    int h = tr.dim(2), w = tr.dim(3);
    Var s_rgb = tokens_from_map(g, f_rgb);
    Var s_depth = tokens_from_map(g, f_depth);
    Var fused_rgb = cross_direction(g, rgb_query, s_rgb, s_depth, heads);
    Var fused_depth = cross_direction(g, depth_query, s_depth, s_rgb, heads);
    return {map_from_tokens(g, fused_rgb, h, w), map_from_tokens(g, fused_depth, h, w)};
}

void FineFusion::collect(const std::string& prefix, ParamList& out) {
    rgb_query.collect(prefix + ".rgb_q", out);
    depth_query.collect(prefix + ".depth_q", out);
}

void C2FFM::init(int channels, int heads, Rng& rng, int down_factor, int dilation, bool out_proj) {
    coarse.init(channels, down_factor, dilation, rng);
    for (auto& f : fine) f.init(channels, heads, out_proj, rng);
}

Var C2FFM::coarse_fuse(Graph& g, Var f_rgb, Var f_depth) { return coarse.fwd(g, f_rgb, f_depth); }

std::pair<Var, Var> C2FFM::fine_fuse(Graph& g, int stage, Var f_rgb, Var f_depth) {
    return fine[static_cast<size_t>(stage)].fwd(g, f_rgb, f_depth);
}

void C2FFM::collect(const std::string& prefix, ParamList& out) {
    coarse.collect(prefix + ".coarse", out);
    for (size_t i = 0; i < fine.size(); ++i)
        fine[i].collect(prefix + ".fine." + std::to_string(i), out);
}

}  // namespace spda
