#include "spda/backbone.hpp"

#include "spda/errors.hpp"

namespace spda {

void BackboneConfig::validate() const {
    if (image_size <= 0 || patch_size <= 0)
        throw ConfigError("image_size and patch_size must be positive");
    if (image_size % patch_size != 0)
        throw ConfigError("image_size " + std::to_string(image_size) +
                          " not divisible by patch_size " + std::to_string(patch_size));
    if (embed_dim % heads != 0)
        throw ConfigError("embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
                          std::to_string(heads));
    if (depth < 12)
        throw ConfigError("depth " + std::to_string(depth) +
                          " too small: fusion taps {2,5,8,11} require at least 12 blocks");
    if (lora_rank < 0) throw ConfigError("lora_rank must be >= 0");
    if (lora_rank > 0 && lora_alpha <= 0.0) throw ConfigError("lora_alpha must be positive");
    if (mlp_ratio <= 0) throw ConfigError("mlp_ratio must be positive");
}

void LoraAdapter::init(int c, int rank_, double alpha_, Rng& rng) {
    rank = rank_;
    alpha = alpha_;
    if (rank <= 0) return;
    a.value = Tensor({c, rank});
    fill_normal(a.value, rng, 0.0, 0.02);
    b.value = Tensor::zeros({rank, c});
}

Var LoraAdapter::adapt(Graph& g, Var w) const {
    if (rank <= 0) return w;
    Var delta = g.matmul(g.param(a), g.param(b));
    return g.add(w, g.scale(delta, alpha / rank));
}

void LoraAdapter::collect(const std::string& prefix, ParamList& out) {
    if (rank <= 0) return;
    out.add(a, prefix + ".a", true);
    out.add(b, prefix + ".b", true);
}

void TransformerBlock::init(const BackboneConfig& cfg, Rng& rng) {
    int c = cfg.embed_dim;
    heads = cfg.heads;
    ln1.init(c);
    ln2.init(c);
    wq.init(c, c, rng);
    wk.init(c, c, rng);
    wv.init(c, c, rng);
    wo.init(c, c, rng);
    lora_q.init(c, cfg.lora_rank, cfg.lora_alpha, rng);
    lora_v.init(c, cfg.lora_rank, cfg.lora_alpha, rng);
    mlp.init(c, c * cfg.mlp_ratio, c, rng);
}

Var TransformerBlock::fwd_tokens(Graph& g, Var x) const {
    Var h = ln1.fwd(g, x);
    Var q = g.linear(h, lora_q.adapt(g, g.param(wq.w)), g.param(wq.b));
    Var k = wk.fwd(g, h);
    Var v = g.linear(h, lora_v.adapt(g, g.param(wv.w)), g.param(wv.b));
    Var attn = multihead_attention(g, q, k, v, heads);
    x = g.add(x, wo.fwd(g, attn));
    Var h2 = ln2.fwd(g, x);
    return g.add(x, mlp.fwd(g, h2));
}

Var TransformerBlock::fwd_map(Graph& g, Var x) const {
    const Tensor& t = g.value(x);
    int hgt = t.dim(2), wid = t.dim(3);
    Var tok = tokens_from_map(g, x);
    tok = fwd_tokens(g, tok);
    return map_from_tokens(g, tok, hgt, wid);
}

void TransformerBlock::collect(const std::string& prefix, ParamList& out) {
    ln1.collect(prefix + ".ln1", out);
    wq.collect(prefix + ".wq", out);
    wk.collect(prefix + ".wk", out);
    wv.collect(prefix + ".wv", out);
    wo.collect(prefix + ".wo", out);
    lora_q.collect(prefix + ".lora_q", out);
    lora_v.collect(prefix + ".lora_v", out);
    ln2.collect(prefix + ".ln2", out);
    mlp.collect(prefix + ".mlp", out);
}

void PatchEmbed::init(const BackboneConfig& cfg, Rng& rng) {
    image_size = cfg.image_size;
    patch_size = cfg.patch_size;
    embed_dim = cfg.embed_dim;
    proj.init(3, cfg.embed_dim, cfg.patch_size, cfg.patch_size, 0, rng);
    pos.value = Tensor({1, cfg.embed_dim, cfg.grid(), cfg.grid()});
    fill_normal(pos.value, rng, 0.0, 0.02);
}

Var PatchEmbed::fwd(Graph& g, Var image) const {
    const Tensor& x = g.value(image);
    if (x.rank() != 4)
        throw ConfigError("patch_embed: expected rank-4 image batch, got " + shape_str(x.shape));
    if (x.dim(1) != 3)
        throw ConfigError("patch_embed: channel count must be 3, got " + std::to_string(x.dim(1)));
    if (x.dim(2) != image_size || x.dim(3) != image_size)
        throw ConfigError("patch_embed: spatial size " + std::to_string(x.dim(2)) + "x" +
                          std::to_string(x.dim(3)) + " does not match configured image_size " +
                          std::to_string(image_size));
    int b = x.dim(0);
    Var e = proj.fwd(g, image);
    Var p = g.param(pos);
    return g.add(e, b == 1 ? p : g.repeat_outer(p, b));
}

void PatchEmbed::collect(const std::string& prefix, ParamList& out) {
    proj.collect(prefix + ".proj", out);
    out.add(pos, prefix + ".pos", true);
}

void ViTPath::init(const BackboneConfig& cfg, Rng& rng) {
    embed.init(cfg, rng);
    blocks.resize(static_cast<size_t>(cfg.depth));
    for (auto& blk : blocks) blk.init(cfg, rng);
}

void ViTPath::collect(const std::string& prefix, ParamList& out) {
    embed.collect(prefix + ".embed", out);
    for (size_t i = 0; i < blocks.size(); ++i)
        blocks[i].collect(prefix + ".blocks." + std::to_string(i), out);
}

void DualPathEncoder::init(const BackboneConfig& c, int decoder_dim_, Rng& rng) {
    cfg = c;
    cfg.validate();
    decoder_dim = decoder_dim_;
    rgb_path.init(cfg, rng);
    depth_path.init(cfg, rng);
    neck.init(cfg.embed_dim, decoder_dim, 1, 1, 0, rng);
}

EncoderOutput DualPathEncoder::run(Graph& g, Var rgb, Var depth3, FusionHandle* fusion,
                                   bool use_fusion) const {
    if (use_fusion && fusion == nullptr)
        throw ConfigError("run_dual_paths: fusion enabled but no fusion handle supplied");

    EncoderOutput out;
    Var r = rgb_path.embed.fwd(g, rgb);
    out.rgb_taps[0] = r;

    if (!use_fusion) {
        // RGB-only wiring: the depth path cannot influence the output, skip it.
        for (int i = 1; i <= cfg.depth; ++i) {
            r = rgb_path.blocks[static_cast<size_t>(i - 1)].fwd_map(g, r);
            for (int tap : kFineFusionBlocks)
                if (i == tap) out.rgb_taps[i] = r;
            if (i == 2) out.tap_block2_rgb = r;
            if (i == kFineFusionBlocks[3]) out.tap_fine4_rgb = r;
        }
        out.final_rgb = neck.fwd(g, r);
        return out;
    }

    Var d = depth_path.embed.fwd(g, depth3);
    out.depth_taps[0] = d;
    {
        const Tensor& tr = g.value(r);
        const Tensor& td = g.value(d);
        if (tr.shape != td.shape)
            throw ShapeError("run_dual_paths: path shapes diverge " + shape_str(tr.shape) +
                             " vs " + shape_str(td.shape));
    }
    r = fusion->coarse_fuse(g, r, d);  // depth stream continues unmodified

    int stage = 0;
    for (int i = 1; i <= cfg.depth; ++i) {
        r = rgb_path.blocks[static_cast<size_t>(i - 1)].fwd_map(g, r);
        d = depth_path.blocks[static_cast<size_t>(i - 1)].fwd_map(g, d);
        if (stage < 4 && i == kFineFusionBlocks[stage]) {
            out.rgb_taps[i] = r;
            out.depth_taps[i] = d;
            if (i == 2) out.tap_block2_rgb = r;
            auto [fr, fd] = fusion->fine_fuse(g, stage, r, d);
            r = fr;
            d = fd;
            if (stage == 3) out.tap_fine4_rgb = r;
            ++stage;
        }
    }
    out.final_rgb = neck.fwd(g, r);
    return out;
}

void DualPathEncoder::collect(const std::string& prefix, ParamList& out) {
    rgb_path.collect(prefix + ".rgb", out);
    depth_path.collect(prefix + ".depth", out);
    neck.collect(prefix + ".neck", out);
}

}  // namespace spda
