#pragma once

#include <string>
#include <vector>

#include "spda/graph.hpp"
#include "spda/tensor.hpp"

namespace spda {

using Var = Graph::Var;

// Ordered, named view over a model's parameters. Order is the checkpoint and
// optimizer order, so collection must be deterministic.
struct ParamList {
    std::vector<ParamTensor*> items;

    void add(ParamTensor& p, std::string name, bool no_decay = false) {
        p.name = std::move(name);
        p.no_decay = no_decay;
        items.push_back(&p);
    }
    ParamTensor* find(const std::string& name) const {
        for (auto* p : items)
            if (p->name == name) return p;
        return nullptr;
    }
    int64_t total_elements() const {
        int64_t n = 0;
        for (auto* p : items) n += p->value.numel();
        return n;
    }
};

struct Linear {
    ParamTensor w;  // (in, out)
    ParamTensor b;  // (out)
    bool has_bias = true;

    void init(int in, int out, Rng& rng, double w_std = 0.02, bool bias = true);
    Var fwd(Graph& g, Var x) const;
    void collect(const std::string& prefix, ParamList& out);
};

struct Conv2d {
    ParamTensor w;  // (cout, cin, k, k)
    ParamTensor b;  // (cout)
    int stride = 1, pad = 0, dilation = 1;
    bool has_bias = true;

    void init(int cin, int cout, int k, int stride, int pad, Rng& rng, int dilation = 1,
              bool bias = true);
    Var fwd(Graph& g, Var x) const;
    void collect(const std::string& prefix, ParamList& out);
};

struct ConvT2d {
    ParamTensor w;  // (cin, cout, k, k)
    ParamTensor b;  // (cout)
    int stride = 2;

    void init(int cin, int cout, int k, int stride, Rng& rng);
    Var fwd(Graph& g, Var x) const;
    void collect(const std::string& prefix, ParamList& out);
};

// Normalizes the last dimension of token tensors (..., C).
struct LayerNorm {
    ParamTensor gamma, beta;
    void init(int c);
    Var fwd(Graph& g, Var x) const { return g.layernorm_last(x, g.param(gamma), g.param(beta)); }
    void collect(const std::string& prefix, ParamList& out);
};

// Normalizes the channel dimension of feature maps (B, C, H, W).
struct LayerNorm2d {
    ParamTensor gamma, beta;
    void init(int c);
    Var fwd(Graph& g, Var x) const { return g.layernorm_chan(x, g.param(gamma), g.param(beta)); }
    void collect(const std::string& prefix, ParamList& out);
};

struct Mlp {
    Linear fc1, fc2;
    void init(int in, int hidden, int out, Rng& rng);
    Var fwd(Graph& g, Var x) const { return fc2.fwd(g, g.gelu(fc1.fwd(g, x))); }
    void collect(const std::string& prefix, ParamList& out);
};

// Three-layer MLP with ReLU, used by the decoder heads.
struct Mlp3 {
    Linear fc1, fc2, fc3;
    void init(int in, int hidden, int out, Rng& rng);
    Var fwd(Graph& g, Var x) const {
        return fc3.fwd(g, g.relu(fc2.fwd(g, g.relu(fc1.fwd(g, x)))));
    }
    void collect(const std::string& prefix, ParamList& out);
};

// Full projected multi-head attention (q/k/v/out projections).
struct Attention {
    Linear q, k, v, o;
    int heads = 1;

    void init(int dim, int heads, Rng& rng);
    // qx (B, Nq, C), kx/vx (B, Nk, C) -> (B, Nq, C)
    Var fwd(Graph& g, Var qx, Var kx, Var vx) const;
    void collect(const std::string& prefix, ParamList& out);
};

// Scaled dot-product attention over already-projected tokens.
// q (B, Nq, C), k/v (B, Nk, C); heads must divide C. Returns (B, Nq, C).
Var multihead_attention(Graph& g, Var q, Var k, Var v, int heads);

// (B, C, H, W) <-> (B, H*W, C)
Var tokens_from_map(Graph& g, Var fmap);
Var map_from_tokens(Graph& g, Var tokens, int h, int w);

}  // namespace spda
