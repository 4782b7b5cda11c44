#include "spda/nn.hpp"

#include <cmath>

#include "spda/errors.hpp"

namespace spda {

void Linear::init(int in, int out, Rng& rng, double w_std, bool bias) {
    w.value = Tensor({in, out});
    fill_normal(w.value, rng, 0.0, w_std);
    has_bias = bias;
    if (bias) b.value = Tensor::zeros({out});
}

Var Linear::fwd(Graph& g, Var x) const {
    return g.linear(x, g.param(w), has_bias ? g.param(b) : Graph::kNoVar);
}

void Linear::collect(const std::string& prefix, ParamList& out) {
    out.add(w, prefix + ".w");
    if (has_bias) out.add(b, prefix + ".b", true);
}

void Conv2d::init(int cin, int cout, int k, int stride_, int pad_, Rng& rng, int dilation_,
                  bool bias) {
    stride = stride_;
    pad = pad_;
    dilation = dilation_;
    has_bias = bias;
    w.value = Tensor({cout, cin, k, k});
    double std = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
    fill_normal(w.value, rng, 0.0, std);
    if (bias) b.value = Tensor::zeros({cout});
}

Var Conv2d::fwd(Graph& g, Var x) const {
    return g.conv2d(x, g.param(w), has_bias ? g.param(b) : Graph::kNoVar, stride, pad, dilation);
}

void Conv2d::collect(const std::string& prefix, ParamList& out) {
    out.add(w, prefix + ".w");
    if (has_bias) out.add(b, prefix + ".b", true);
}

void ConvT2d::init(int cin, int cout, int k, int stride_, Rng& rng) {
    stride = stride_;
    w.value = Tensor({cin, cout, k, k});
    double std = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
    fill_normal(w.value, rng, 0.0, std);
    b.value = Tensor::zeros({cout});
}

Var ConvT2d::fwd(Graph& g, Var x) const {
    return g.conv_transpose2d(x, g.param(w), g.param(b), stride);
}

void ConvT2d::collect(const std::string& prefix, ParamList& out) {
    out.add(w, prefix + ".w");
    out.add(b, prefix + ".b", true);
}

void LayerNorm::init(int c) {
    gamma.value = Tensor::full({c}, 1.0);
    beta.value = Tensor::zeros({c});
}

void LayerNorm::collect(const std::string& prefix, ParamList& out) {
    out.add(gamma, prefix + ".g", true);
    out.add(beta, prefix + ".b", true);
}

void LayerNorm2d::init(int c) {
    gamma.value = Tensor::full({c}, 1.0);
    beta.value = Tensor::zeros({c});
}

void LayerNorm2d::collect(const std::string& prefix, ParamList& out) {
    out.add(gamma, prefix + ".g", true);
    out.add(beta, prefix + ".b", true);
}

void Mlp::init(int in, int hidden, int out, Rng& rng) {
    fc1.init(in, hidden, rng);
    fc2.init(hidden, out, rng);
}

void Mlp::collect(const std::string& prefix, ParamList& out) {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
}

void Mlp3::init(int in, int hidden, int out, Rng& rng) {
    fc1.init(in, hidden, rng);
    fc2.init(hidden, hidden, rng);
    fc3.init(hidden, out, rng);
}

void Mlp3::collect(const std::string& prefix, ParamList& out) {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
    fc3.collect(prefix + ".fc3", out);
}

void Attention::init(int dim, int heads_, Rng& rng) {
    heads = heads_;
    if (dim % heads != 0)
        throw ConfigError("attention dim " + std::to_string(dim) + " not divisible by heads " +
                          std::to_string(heads));
    q.init(dim, dim, rng);
    k.init(dim, dim, rng);
    v.init(dim, dim, rng);
    o.init(dim, dim, rng);
}

Var Attention::fwd(Graph& g, Var qx, Var kx, Var vx) const {
    Var qp = q.fwd(g, qx);
    Var kp = k.fwd(g, kx);
    Var vp = v.fwd(g, vx);
    Var attn = multihead_attention(g, qp, kp, vp, heads);
    return o.fwd(g, attn);
}

void Attention::collect(const std::string& prefix, ParamList& out) {
    q.collect(prefix + ".q", out);
    k.collect(prefix + ".k", out);
    v.collect(prefix + ".v", out);
    o.collect(prefix + ".o", out);
}

Var multihead_attention(Graph& g, Var q, Var k, Var v, int heads) {
    const Tensor& Q = g.value(q);
    const Tensor& K = g.value(k);
    if (Q.rank() != 3 || K.rank() != 3)
        throw ShapeError("multihead_attention expects rank-3 token tensors");
    int B = Q.dim(0), Nq = Q.dim(1), C = Q.dim(2), Nk = K.dim(1);
    if (C % heads != 0) throw ShapeError("attention width not divisible by head count");
    int d = C / heads;

    auto split = [&](Var t, int n) {
        // (B, N, C) -> (B*h, N, d)
        Var r = g.reshape(t, {B, n, heads, d});
        r = g.permute(r, {0, 2, 1, 3});
        return g.reshape(r, {B * heads, n, d});
    };
    Var qh = split(q, Nq);
    Var kh = split(k, Nk);
    Var vh = split(v, Nk);

    Var scores = g.scale(g.bmm(qh, g.transpose_last2(kh)), 1.0 / std::sqrt(static_cast<double>(d)));
    Var probs = g.softmax_last(scores);
    Var out = g.bmm(probs, vh);  // (B*h, Nq, d)
    out = g.reshape(out, {B, heads, Nq, d});
    out = g.permute(out, {0, 2, 1, 3});
    return g.reshape(out, {B, Nq, C});
}

Var tokens_from_map(Graph& g, Var fmap) {
    const Tensor& x = g.value(fmap);
    if (x.rank() != 4) throw ShapeError("tokens_from_map expects (B,C,H,W)");
    int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Var p = g.permute(fmap, {0, 2, 3, 1});
    return g.reshape(p, {B, H * W, C});
}

Var map_from_tokens(Graph& g, Var tokens, int h, int w) {
    const Tensor& x = g.value(tokens);
    if (x.rank() != 3 || x.dim(1) != h * w)
        throw ShapeError("map_from_tokens: tokens " + shape_str(x.shape) + " vs grid " +
                         std::to_string(h) + "x" + std::to_string(w));
    int B = x.dim(0), C = x.dim(2);
    Var r = g.reshape(tokens, {B, h, w, C});
    return g.permute(r, {0, 3, 1, 2});
}

}  // namespace spda
