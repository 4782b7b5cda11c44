#include "spda/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "spda/errors.hpp"

namespace spda {

namespace {
constexpr double kDeltaClamp = 4.0;  // bounds exp() in box decoding
}

void RpnHead::init(int in_c, Rng& rng) {
    conv.init(in_c, in_c, 3, 1, 1, rng);
    obj.init(in_c, anchors_per_cell(), 1, 1, 0, rng);
    reg.init(in_c, 4 * anchors_per_cell(), 1, 1, 0, rng);
}

std::vector<BoxF> RpnHead::make_anchors(int grid_h, int grid_w, int image_size) const {
    std::vector<BoxF> anchors;
    anchors.reserve(static_cast<size_t>(grid_h) * grid_w * anchor_scales.size());
    double stride_y = static_cast<double>(image_size) / grid_h;
    double stride_x = static_cast<double>(image_size) / grid_w;
    for (int oy = 0; oy < grid_h; ++oy)
        for (int ox = 0; ox < grid_w; ++ox)
            for (double s : anchor_scales) {
                double cx = (ox + 0.5) * stride_x;
                double cy = (oy + 0.5) * stride_y;
                double half = 0.5 * s * image_size;
                anchors.push_back({cx - half, cy - half, cx + half, cy + half});
            }
    return anchors;
}

RpnHead::Output RpnHead::fwd(Graph& g, Var embedding, int image_size) const {
    const Tensor& e = g.value(embedding);
    if (e.rank() != 4 || e.dim(0) != 1)
        throw ShapeError("rpn: expected (1,C,h,w) embedding, got " + shape_str(e.shape));
    int h = e.dim(2), w = e.dim(3);
    int a = anchors_per_cell();

    Var feat = g.relu(conv.fwd(g, embedding));
    Var ol = obj.fwd(g, feat);  // (1, A, h, w)
    Var rg = reg.fwd(g, feat);  // (1, 4A, h, w)

    Output out;
    out.anchors = make_anchors(h, w, image_size);
    // anchor order is (y, x, scale); bring channel last before flattening
    Var olp = g.permute(g.reshape(ol, {a, h, w}), {1, 2, 0});
    out.obj_logits = g.reshape(olp, {h * w * a});
    Var rgp = g.permute(g.reshape(rg, {a, 4, h, w}), {2, 3, 0, 1});
    out.deltas = g.reshape(rgp, {h * w * a, 4});
    return out;
}

std::array<double, 4> encode_box_delta(const BoxF& anchor, const BoxF& target) {
    double aw = anchor.width(), ah = anchor.height();
    double ax = 0.5 * (anchor.x1 + anchor.x2), ay = 0.5 * (anchor.y1 + anchor.y2);
    double tw = target.width(), th = target.height();
    double tx = 0.5 * (target.x1 + target.x2), ty = 0.5 * (target.y1 + target.y2);
    return {(tx - ax) / aw, (ty - ay) / ah, std::log(tw / aw), std::log(th / ah)};
}

BoxF decode_box_delta(const BoxF& anchor, const double* d) {
    double aw = anchor.width(), ah = anchor.height();
    double ax = 0.5 * (anchor.x1 + anchor.x2), ay = 0.5 * (anchor.y1 + anchor.y2);
    double cx = ax + d[0] * aw;
    double cy = ay + d[1] * ah;
    double w = aw * std::exp(std::clamp(d[2], -kDeltaClamp, kDeltaClamp));
    double h = ah * std::exp(std::clamp(d[3], -kDeltaClamp, kDeltaClamp));
    return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

std::vector<int> nms_boxes(const std::vector<BoxF>& boxes, const std::vector<double>& scores,
                           double iou_thresh) {
    std::vector<int> order(boxes.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int i, int j) { return scores[static_cast<size_t>(i)] > scores[static_cast<size_t>(j)]; });
    std::vector<int> keep;
    std::vector<char> dead(boxes.size(), 0);
    for (size_t ii = 0; ii < order.size(); ++ii) {
        int i = order[ii];
        if (dead[static_cast<size_t>(i)]) continue;
        keep.push_back(i);
        for (size_t jj = ii + 1; jj < order.size(); ++jj) {
            int j = order[jj];
            if (!dead[static_cast<size_t>(j)] &&
                box_iou(boxes[static_cast<size_t>(i)], boxes[static_cast<size_t>(j)]) > iou_thresh)
                dead[static_cast<size_t>(j)] = 1;
        }
    }
    return keep;
}

std::vector<Proposal> RpnHead::propose(const Graph& g, const Output& out, int image_size) const {
    const Tensor& logits = g.value(out.obj_logits);
    const Tensor& deltas = g.value(out.deltas);
    int n = static_cast<int>(out.anchors.size());
    std::vector<BoxF> boxes;
    std::vector<double> scores;
    boxes.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        BoxF b = decode_box_delta(out.anchors[static_cast<size_t>(i)],
                                  deltas.ptr() + static_cast<int64_t>(i) * 4)
                     .clipped(image_size, image_size);
        if (b.width() < 1.0 || b.height() < 1.0) continue;
        boxes.push_back(b);
        scores.push_back(1.0 / (1.0 + std::exp(-logits[i])));
    }
    std::vector<int> keep = nms_boxes(boxes, scores, nms_iou);
    if (static_cast<int>(keep.size()) > topk) keep.resize(static_cast<size_t>(topk));
    std::vector<Proposal> props;
    props.reserve(keep.size());
    for (int i : keep) props.push_back({boxes[static_cast<size_t>(i)], scores[static_cast<size_t>(i)]});
    return props;
}

void RpnHead::collect(const std::string& prefix, ParamList& out) {
    conv.collect(prefix + ".conv", out);
    obj.collect(prefix + ".obj", out);
    reg.collect(prefix + ".reg", out);
}

// ---------------- prompt encoder ----------------

void PromptEncoder::init(int prompt_dim_, Rng& rng) {
    prompt_dim = prompt_dim_;
    if (prompt_dim % 2 != 0) throw ConfigError("prompt_dim must be even");
    pe_freq.value = Tensor({2, prompt_dim / 2});
    fill_normal(pe_freq.value, rng, 0.0, 1.0);
    pe_freq.trainable = false;
    corner_embed.value = Tensor({2, prompt_dim});
    fill_normal(corner_embed.value, rng, 0.0, 0.02);
    no_mask_embed.value = Tensor({prompt_dim});
    fill_normal(no_mask_embed.value, rng, 0.0, 0.02);
}

std::vector<double> PromptEncoder::encode_point(double x01, double y01) const {
    int half = prompt_dim / 2;
    std::vector<double> out(static_cast<size_t>(prompt_dim));
    double cx = 2.0 * x01 - 1.0, cy = 2.0 * y01 - 1.0;
    for (int j = 0; j < half; ++j) {
        double p = 2.0 * M_PI * (cx * pe_freq.value.at2(0, j) + cy * pe_freq.value.at2(1, j));
        out[static_cast<size_t>(j)] = std::sin(p);
        out[static_cast<size_t>(half + j)] = std::cos(p);
    }
    return out;
}

Tensor PromptEncoder::pe_grid(int h, int w) const {
    Tensor out({1, h * w, prompt_dim});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            auto pe = encode_point((x + 0.5) / w, (y + 0.5) / h);
            std::copy(pe.begin(), pe.end(),
                      out.ptr() + (static_cast<int64_t>(y) * w + x) * prompt_dim);
        }
    return out;
}

Var PromptEncoder::boxes_to_sparse(Graph& g, const std::vector<Proposal>& proposals,
                                   int image_size) const {
    int k = static_cast<int>(proposals.size());
    Tensor pe({k, 2, prompt_dim});
    for (int i = 0; i < k; ++i) {
        const BoxF& b = proposals[static_cast<size_t>(i)].box;
        if (!b.valid())
            throw ConfigError("boxes_to_sparse_prompts: degenerate box (" + std::to_string(b.x1) +
                              "," + std::to_string(b.y1) + "," + std::to_string(b.x2) + "," +
                              std::to_string(b.y2) + ") rejected");
        auto tl = encode_point(b.x1 / image_size, b.y1 / image_size);
        auto br = encode_point(b.x2 / image_size, b.y2 / image_size);
        std::copy(tl.begin(), tl.end(), pe.ptr() + (static_cast<int64_t>(i) * 2 + 0) * prompt_dim);
        std::copy(br.begin(), br.end(), pe.ptr() + (static_cast<int64_t>(i) * 2 + 1) * prompt_dim);
    }
    Var pe_var = g.constant(std::move(pe));
    Var corners = g.reshape(g.param(corner_embed), {1, 2, prompt_dim});
    return g.add(pe_var, k == 1 ? corners : g.repeat_outer(corners, k));
}

Var PromptEncoder::no_mask_dense(Graph& g, int k, int h, int w) const {
    Var e = g.reshape(g.param(no_mask_embed), {1, prompt_dim});
    if (k > 1) e = g.repeat_outer(e, k);
    Var ones = g.constant(Tensor::full({k, prompt_dim, h, w}, 1.0));
    return g.mul_channel(ones, e);
}

void PromptEncoder::collect(const std::string& prefix, ParamList& out) {
    out.add(pe_freq, prefix + ".pe_freq", true);
    out.add(corner_embed, prefix + ".corner_embed", true);
    out.add(no_mask_embed, prefix + ".no_mask_embed", true);
}

// ---------------- two-way decoder ----------------

void TwoWayLayer::init(int dim, int heads, int mlp_dim, Rng& rng) {
    self_attn.init(dim, heads, rng);
    ln1.init(dim);
    cross_token_to_image.init(dim, heads, rng);
    ln2.init(dim);
    mlp.init(dim, mlp_dim, dim, rng);
    ln3.init(dim);
    cross_image_to_token.init(dim, heads, rng);
    ln4.init(dim);
}

std::pair<Var, Var> TwoWayLayer::fwd(Graph& g, Var tokens, Var src, Var token_pe,
                                     Var src_pe) const {
    Var q = skip_first_layer_pe ? tokens : g.add(tokens, token_pe);
    Var attn = self_attn.fwd(g, q, q, tokens);
    tokens = ln1.fwd(g, g.add(tokens, attn));

    q = g.add(tokens, token_pe);
    Var k = g.add(src, src_pe);
    attn = cross_token_to_image.fwd(g, q, k, src);
    tokens = ln2.fwd(g, g.add(tokens, attn));

    tokens = ln3.fwd(g, g.add(tokens, mlp.fwd(g, tokens)));

    q = g.add(src, src_pe);
    k = g.add(tokens, token_pe);
    attn = cross_image_to_token.fwd(g, q, k, tokens);
    src = ln4.fwd(g, g.add(src, attn));
    return {tokens, src};
}

void TwoWayLayer::collect(const std::string& prefix, ParamList& out) {
    self_attn.collect(prefix + ".self", out);
    ln1.collect(prefix + ".ln1", out);
    cross_token_to_image.collect(prefix + ".t2i", out);
    ln2.collect(prefix + ".ln2", out);
    mlp.collect(prefix + ".mlp", out);
    ln3.collect(prefix + ".ln3", out);
    cross_image_to_token.collect(prefix + ".i2t", out);
    ln4.collect(prefix + ".ln4", out);
}

void MaskDecoder::init(int prompt_dim_, int heads_, int num_layers, int mlp_dim, bool cls_head_,
                       int num_classes, Rng& rng) {
    prompt_dim = prompt_dim_;
    heads = heads_;
    use_cls_head = cls_head_;
    iou_token.value = Tensor({1, 1, prompt_dim});
    fill_normal(iou_token.value, rng, 0.0, 0.02);
    mask_token.value = Tensor({1, 1, prompt_dim});
    fill_normal(mask_token.value, rng, 0.0, 0.02);
    layers.resize(static_cast<size_t>(num_layers));
    for (size_t i = 0; i < layers.size(); ++i) {
        layers[i].init(prompt_dim, heads, mlp_dim, rng);
        layers[i].skip_first_layer_pe = (i == 0);
    }
    final_token_to_image.init(prompt_dim, heads, rng);
    final_ln.init(prompt_dim);
    up1.init(prompt_dim, prompt_dim, 2, 2, rng);
    up_ln.init(prompt_dim);
    up2.init(prompt_dim, prompt_dim, 2, 2, rng);
    mask_mlp.init(prompt_dim, prompt_dim, prompt_dim, rng);
    iou_mlp.init(prompt_dim, prompt_dim, 1, rng);
    if (use_cls_head) cls_head.init(prompt_dim, num_classes + 1, rng);
}

DecodeResult MaskDecoder::decode(Graph& g, Var embedding, Var sparse, Var dense,
                                 const Tensor& pe_grid, int out_size) const {
    const Tensor& emb = g.value(embedding);
    if (emb.rank() != 4 || emb.dim(0) != 1 || emb.dim(1) != prompt_dim)
        throw ConfigError("decode: embedding " + shape_str(emb.shape) +
                          " does not match prompt width " + std::to_string(prompt_dim));
    const Tensor& sp = g.value(sparse);
    if (sp.rank() != 3 || sp.dim(2) != prompt_dim)
        throw ConfigError("decode: sparse prompts " + shape_str(sp.shape) +
                          " do not match prompt width " + std::to_string(prompt_dim));
    int k = sp.dim(0);
    int h = emb.dim(2), w = emb.dim(3);
    const Tensor& dn = g.value(dense);
    if (dn.shape != Shape{k, prompt_dim, h, w})
        throw ConfigError("decode: dense prompt " + shape_str(dn.shape) + " must be " +
                          shape_str({k, prompt_dim, h, w}));

    // token group per proposal: [iou, mask, sparse...]
    Var special = g.concat2(g.param(iou_token), g.param(mask_token), 1);  // (1, 2, C)
    if (k > 1) special = g.repeat_outer(special, k);
    Var tokens = g.concat2(special, sparse, 1);  // (K, 2+ns, C)
    Var token_pe = tokens;

    Var src = tokens_from_map(g, embedding);  // (1, N, C)
    if (k > 1) src = g.repeat_outer(src, k);
    src = g.add(src, tokens_from_map(g, dense));
    Var src_pe = g.constant(pe_grid);
    if (k > 1) src_pe = g.repeat_outer(src_pe, k);

    for (const auto& layer : layers) {
        auto [t2, s2] = layer.fwd(g, tokens, src, token_pe, src_pe);
        tokens = t2;
        src = s2;
    }
    Var q = g.add(tokens, token_pe);
    Var kk = g.add(src, src_pe);
    tokens = final_ln.fwd(g, g.add(tokens, final_token_to_image.fwd(g, q, kk, src)));

    Var iou_tok = g.reshape(g.slice(tokens, 1, 0, 1), {k, prompt_dim});
    Var mask_tok = g.reshape(g.slice(tokens, 1, 1, 1), {k, prompt_dim});

    Var src_map = map_from_tokens(g, src, h, w);  // (K, C, h, w)
    Var up = g.gelu(up_ln.fwd(g, up1.fwd(g, src_map)));
    Var f_src = g.gelu(up2.fwd(g, up));  // (K, C, 4h, 4w)

    Var weights = g.reshape(mask_mlp.fwd(g, mask_tok), {k, 1, prompt_dim});
    Var flat = g.reshape(f_src, {k, prompt_dim, 16 * h * w});
    Var lowres = g.reshape(g.bmm(weights, flat), {k, 1, 4 * h, 4 * w});
    Var logits = g.upsample_bilinear(lowres, out_size, out_size);

    DecodeResult res;
    res.mask_logits = g.reshape(logits, {1, k, out_size, out_size});
    res.iou_pred = g.reshape(iou_mlp.fwd(g, iou_tok), {k});
    res.f_src = f_src;
    if (use_cls_head) res.cls_logits = cls_head.fwd(g, mask_tok);
    return res;
}

void MaskDecoder::collect(const std::string& prefix, ParamList& out) {
    out.add(iou_token, prefix + ".iou_token", true);
    out.add(mask_token, prefix + ".mask_token", true);
    for (size_t i = 0; i < layers.size(); ++i)
        layers[i].collect(prefix + ".layers." + std::to_string(i), out);
    final_token_to_image.collect(prefix + ".final_t2i", out);
    final_ln.collect(prefix + ".final_ln", out);
    up1.collect(prefix + ".up1", out);
    up_ln.collect(prefix + ".up_ln", out);
    up2.collect(prefix + ".up2", out);
    mask_mlp.collect(prefix + ".mask_mlp", out);
    iou_mlp.collect(prefix + ".iou_mlp", out);
    if (use_cls_head) cls_head.collect(prefix + ".cls", out);
}

}  // namespace spda
