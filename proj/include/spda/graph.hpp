#pragma once

#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "spda/tensor.hpp"

namespace spda {

// Named model parameter. Modules own these; graphs only reference them.
struct ParamTensor {
    std::string name;
    Tensor value;
    bool trainable = true;   // false for fixed buffers (e.g. positional frequency banks)
    bool no_decay = false;   // norms, biases, embeddings skip weight decay
};

// Reverse-mode tape. One Graph per forward pass; nodes are created in
// topological order, so backward() is a reverse sweep over creation order.
// Graphs never mutate ParamTensor storage, so concurrent graphs may read the
// same parameters.
class Graph {
  public:
    using Var = int;
    static constexpr Var kNoVar = -1;

    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool grad_enabled() const { return grad_enabled_; }

    Var leaf(Tensor v, bool requires_grad = false);
    Var constant(Tensor v) { return leaf(std::move(v), false); }
    Var param(const ParamTensor& p);

    const Tensor& value(Var v) const { return nodes_[static_cast<size_t>(v)].value; }
    // Gradient of a node; zeros if backward never reached it.
    Tensor grad_of(Var v) const;
    bool requires_grad(Var v) const { return nodes_[static_cast<size_t>(v)].requires_grad; }

    void backward(Var scalar_root);

    // Parameter leaves touched by this graph, in creation order.
    const std::vector<std::pair<const ParamTensor*, Var>>& param_vars() const { return param_order_; }

    // ---- elementwise ----
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double c);
    Var relu(Var a);
    Var sigmoid(Var a);
    Var gelu(Var a);

    // ---- shape ----
    Var reshape(Var a, Shape s);
    Var permute(Var a, const std::vector<int>& axes);
    Var concat2(Var a, Var b, int axis);
    Var slice(Var a, int axis, int start, int len);
    Var repeat_outer(Var a, int k);  // (1, ...) -> (k, ...)
    Var gather_rows(Var a, std::vector<int> idx);  // along axis 0, repeats allowed

    // ---- linear algebra ----
    Var matmul(Var a, Var b);           // (M,K) x (K,N)
    Var bmm(Var a, Var b);              // (G,M,K) x (G,K,N)
    Var transpose_last2(Var a);         // rank 2 or 3

    // ---- nn ----
    Var linear(Var x, Var w, Var b = kNoVar);  // x (...,K), w (K,N), b (N)
    Var conv2d(Var x, Var w, Var b, int stride, int pad, int dilation = 1);
    Var conv_transpose2d(Var x, Var w, Var b, int stride);  // w (Cin,Cout,kh,kw)
    Var avg_pool2d(Var x, int k);
    Var upsample_bilinear(Var x, int out_h, int out_w);
    Var layernorm_last(Var x, Var gamma, Var beta, double eps = 1e-6);
    Var layernorm_chan(Var x, Var gamma, Var beta, double eps = 1e-6);  // (B,C,H,W) over C
    Var softmax_last(Var x);
    Var gap2d(Var x);                     // (B,C,H,W) -> (B,C)
    Var mul_channel(Var x, Var s);        // (B,C,H,W) * (B,C)

    // ---- reductions / losses ----
    Var sum_all(Var x);
    Var mean_all(Var x);
    Var bce_logits_mean(Var logits, Tensor targets);
    Var mse_mean(Var pred, Tensor target);
    Var smooth_l1_mean(Var pred, Tensor target, double beta = 1.0);
    Var softmax_ce_mean(Var logits, const std::vector<int>& labels);

    size_t num_nodes() const { return nodes_.size(); }

  private:
    using BackFn = std::function<void(Graph&, Var)>;

    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        bool grad_alloc = false;
        BackFn backward;
    };

    // deque: node references stay valid while ops append
    std::deque<Node> nodes_;
    std::unordered_map<const ParamTensor*, Var> param_cache_;
    std::vector<std::pair<const ParamTensor*, Var>> param_order_;
    bool grad_enabled_ = true;

    Var push(Tensor value, bool requires_grad, BackFn bw);
    Var ln_impl(Var x, Var gamma, Var beta, double eps, bool channel_mode);
    Tensor& grad_buf(Var v);
    const Tensor& ngrad(Var v) const { return nodes_[static_cast<size_t>(v)].grad; }
    bool wants(Var v) const { return v >= 0 && nodes_[static_cast<size_t>(v)].requires_grad; }
    const Tensor& val(Var v) const { return nodes_[static_cast<size_t>(v)].value; }
    void check_same_shape(Var a, Var b, const char* op) const;
};

}  // namespace spda
