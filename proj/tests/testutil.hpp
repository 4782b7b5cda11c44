#pragma once

// Shared helpers for the test suites: finite-difference gradient checks and
// small tensor utilities. Everything here is test-only and independent of the
// graph engine's own backward path.

#include <cmath>
#include <functional>
#include <vector>

#include "spda/graph.hpp"
#include "spda/tensor.hpp"

namespace testutil {

using spda::Graph;
using spda::ParamTensor;
using spda::Rng;
using spda::Shape;
using spda::Tensor;

inline Tensor random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(s));
    spda::fill_uniform(t, rng, lo, hi);
    return t;
}

inline double rel_err(double a, double b, double floor = 1e-3) {
    return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), floor});
}

// Indices to probe for finite differences: all of them for small tensors, a
// seeded subset for large ones (FD over every element of a big weight matrix
// adds nothing but runtime).
inline std::vector<int64_t> probe_indices(int64_t numel, Rng& rng, int max_probes = 48) {
    std::vector<int64_t> idx;
    if (numel <= max_probes) {
        for (int64_t i = 0; i < numel; ++i) idx.push_back(i);
        return idx;
    }
    for (int i = 0; i < max_probes; ++i) idx.push_back(rng.next_u64() % static_cast<uint64_t>(numel));
    return idx;
}

// Gradient check for a functional of explicit input tensors.
// `f` must be pure: it is re-invoked on fresh graphs for each FD evaluation.
// Returns the worst relative error over all probed elements.
inline double grad_check_inputs(
    const std::function<Graph::Var(Graph&, const std::vector<Graph::Var>&)>& f,
    const std::vector<Tensor>& inputs, uint64_t probe_seed = 7, double eps = 1e-5,
    int max_probes = 48) {
    Graph g(true);
    std::vector<Graph::Var> vars;
    vars.reserve(inputs.size());
    for (const auto& t : inputs) vars.push_back(g.leaf(t, true));
    Graph::Var root = f(g, vars);
    g.backward(root);

    auto eval = [&](const std::vector<Tensor>& ins) {
        Graph ge(false);
        std::vector<Graph::Var> vs;
        for (const auto& t : ins) vs.push_back(ge.leaf(t, false));
        return ge.value(f(ge, vs))[0];
    };

    Rng prng(probe_seed);
    double worst = 0.0;
    std::vector<Tensor> work = inputs;
    for (size_t i = 0; i < inputs.size(); ++i) {
        Tensor analytic = g.grad_of(vars[i]);
        for (int64_t j : probe_indices(inputs[i].numel(), prng, max_probes)) {
            double orig = work[i][j];
            work[i][j] = orig + eps;
            double fp = eval(work);
            work[i][j] = orig - eps;
            double fm = eval(work);
            work[i][j] = orig;
            double fd = (fp - fm) / (2.0 * eps);
            worst = std::max(worst, rel_err(analytic[j], fd));
        }
    }
    return worst;
}

// Gradient check for module parameters. `forward_root` builds a fresh graph
// over the module's current parameter values each call and returns the scalar
// root. Parameters are temporarily perturbed in place for the FD evaluations.
inline double grad_check_params(const std::function<Graph::Var(Graph&)>& forward_root,
                                const std::vector<ParamTensor*>& params, uint64_t probe_seed = 7,
                                double eps = 1e-5, int max_probes = 32) {
    Graph g(true);
    Graph::Var root = forward_root(g);
    g.backward(root);

    auto eval = [&]() {
        Graph ge(false);
        return ge.value(forward_root(ge))[0];
    };

    Rng prng(probe_seed);
    double worst = 0.0;
    for (ParamTensor* p : params) {
        if (!p->trainable) continue;
        Graph::Var pv = -1;
        for (const auto& [pt, var] : g.param_vars())
            if (pt == p) pv = var;
        Tensor analytic = pv >= 0 ? g.grad_of(pv) : Tensor::zeros(p->value.shape);
        for (int64_t j : probe_indices(p->value.numel(), prng, max_probes)) {
            double orig = p->value[j];
            p->value[j] = orig + eps;
            double fp = eval();
            p->value[j] = orig - eps;
            double fm = eval();
            p->value[j] = orig;
            double fd = (fp - fm) / (2.0 * eps);
            worst = std::max(worst, rel_err(analytic[j], fd));
        }
    }
    return worst;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) return false;
    for (int64_t i = 0; i < a.numel(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

}  // namespace testutil
