#include "spda/graph.hpp"

#include <Eigen/Core>
#include <cmath>
#include <memory>

#include "spda/errors.hpp"

namespace spda {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatM = Eigen::Map<RowMat>;
using CMatM = Eigen::Map<const RowMat>;

double sigmoid_stable(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

double gelu_fwd(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
double gelu_dfwd(double x) {
    double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
    return cdf + x * pdf;
}

struct ConvDims {
    int B, Cin, H, W, Cout, kh, kw, s, p, d, OH, OW;
    int64_t rows() const { return static_cast<int64_t>(B) * OH * OW; }
    int ksize() const { return Cin * kh * kw; }
};

void im2col(const Tensor& x, const ConvDims& c, std::vector<double>& cols) {
    cols.assign(static_cast<size_t>(c.rows()) * c.ksize(), 0.0);
    const double* xp = x.ptr();
    int64_t r = 0;
    for (int b = 0; b < c.B; ++b) {
        const double* xb = xp + static_cast<int64_t>(b) * c.Cin * c.H * c.W;
        for (int oy = 0; oy < c.OH; ++oy) {
            for (int ox = 0; ox < c.OW; ++ox, ++r) {
                double* row = cols.data() + r * c.ksize();
                int col = 0;
                for (int ci = 0; ci < c.Cin; ++ci) {
                    const double* xc = xb + static_cast<int64_t>(ci) * c.H * c.W;
                    for (int ky = 0; ky < c.kh; ++ky) {
                        int iy = oy * c.s - c.p + ky * c.d;
                        for (int kx = 0; kx < c.kw; ++kx, ++col) {
                            int ix = ox * c.s - c.p + kx * c.d;
                            if (iy >= 0 && iy < c.H && ix >= 0 && ix < c.W)
                                row[col] = xc[static_cast<int64_t>(iy) * c.W + ix];
                        }
                    }
                }
            }
        }
    }
}

void col2im_acc(const std::vector<double>& dcols, const ConvDims& c, Tensor& dx) {
    double* xp = dx.ptr();
    int64_t r = 0;
    for (int b = 0; b < c.B; ++b) {
        double* xb = xp + static_cast<int64_t>(b) * c.Cin * c.H * c.W;
        for (int oy = 0; oy < c.OH; ++oy) {
            for (int ox = 0; ox < c.OW; ++ox, ++r) {
                const double* row = dcols.data() + r * c.ksize();
                int col = 0;
                for (int ci = 0; ci < c.Cin; ++ci) {
                    double* xc = xb + static_cast<int64_t>(ci) * c.H * c.W;
                    for (int ky = 0; ky < c.kh; ++ky) {
                        int iy = oy * c.s - c.p + ky * c.d;
                        for (int kx = 0; kx < c.kw; ++kx, ++col) {
                            int ix = ox * c.s - c.p + kx * c.d;
                            if (iy >= 0 && iy < c.H && ix >= 0 && ix < c.W)
                                xc[static_cast<int64_t>(iy) * c.W + ix] += row[col];
                        }
                    }
                }
            }
        }
    }
}

// Fiber bases for layer normalization: offsets of each normalized vector and
// the stride between its elements.
void fibers_last(const Shape& s, std::vector<int64_t>& bases, int& len, int64_t& step) {
    len = s.back();
    step = 1;
    int64_t n = shape_numel(s) / len;
    bases.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) bases[static_cast<size_t>(i)] = i * len;
}

void fibers_chan(const Shape& s, std::vector<int64_t>& bases, int& len, int64_t& step) {
    int B = s[0], C = s[1], H = s[2], W = s[3];
    len = C;
    step = static_cast<int64_t>(H) * W;
    bases.resize(static_cast<size_t>(B) * H * W);
    size_t i = 0;
    for (int b = 0; b < B; ++b)
        for (int64_t hw = 0; hw < static_cast<int64_t>(H) * W; ++hw)
            bases[i++] = static_cast<int64_t>(b) * C * H * W + hw;
}

struct BilinearAxis {
    std::vector<int> i0, i1;
    std::vector<double> w0, w1;
};

BilinearAxis bilinear_axis(int in, int out) {
    BilinearAxis a;
    a.i0.resize(out);
    a.i1.resize(out);
    a.w0.resize(out);
    a.w1.resize(out);
    for (int o = 0; o < out; ++o) {
        double src = (o + 0.5) * static_cast<double>(in) / out - 0.5;
        if (src < 0.0) src = 0.0;
        int i0 = std::min(static_cast<int>(src), in - 1);
        int i1 = std::min(i0 + 1, in - 1);
        double t = src - i0;
        a.i0[o] = i0;
        a.i1[o] = i1;
        a.w0[o] = 1.0 - t;
        a.w1[o] = t;
    }
    return a;
}

}  // namespace

Graph::Var Graph::push(Tensor value, bool requires_grad, BackFn bw) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad && grad_enabled_;
    if (n.requires_grad) n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return static_cast<Var>(nodes_.size()) - 1;
}

Tensor& Graph::grad_buf(Var v) {
    Node& n = nodes_[static_cast<size_t>(v)];
    if (!n.grad_alloc) {
        n.grad = Tensor::zeros(n.value.shape);
        n.grad_alloc = true;
    }
    return n.grad;
}

Graph::Var Graph::leaf(Tensor v, bool requires_grad) {
    return push(std::move(v), requires_grad, nullptr);
}

Graph::Var Graph::param(const ParamTensor& p) {
    auto it = param_cache_.find(&p);
    if (it != param_cache_.end()) return it->second;
    Var v = push(p.value, p.trainable, nullptr);
    param_cache_.emplace(&p, v);
    param_order_.emplace_back(&p, v);
    return v;
}

Tensor Graph::grad_of(Var v) const {
    const Node& n = nodes_[static_cast<size_t>(v)];
    if (!n.grad_alloc) return Tensor::zeros(n.value.shape);
    return n.grad;
}

void Graph::backward(Var root) {
    Node& rn = nodes_[static_cast<size_t>(root)];
    if (rn.value.numel() != 1)
        throw ShapeError("backward root must be scalar, got " + shape_str(rn.value.shape));
    if (!rn.requires_grad) return;
    grad_buf(root)[0] = 1.0;
    for (Var i = root; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (n.requires_grad && n.grad_alloc && n.backward) n.backward(*this, i);
    }
}

void Graph::check_same_shape(Var a, Var b, const char* op) const {
    if (val(a).shape != val(b).shape)
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(val(a).shape) + " vs " +
                         shape_str(val(b).shape));
}

// ---------------- elementwise ----------------

Graph::Var Graph::add(Var a, Var b) {
    check_same_shape(a, b, "add");
    Tensor out = val(a);
    const double* pb = val(b).ptr();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += pb[i];
    return push(std::move(out), wants(a) || wants(b), [a, b](Graph& g, Var self) {
        const Tensor& gy = g.ngrad(self);
        if (g.wants(a)) {
            Tensor& ga = g.grad_buf(a);
            for (int64_t i = 0; i < gy.numel(); ++i) ga[i] += gy[i];
        }
        if (g.wants(b)) {
            Tensor& gb = g.grad_buf(b);
            for (int64_t i = 0; i < gy.numel(); ++i) gb[i] += gy[i];
        }
    });
}

Graph::Var Graph::sub(Var a, Var b) {
    check_same_shape(a, b, "sub");
    Tensor out = val(a);
    const double* pb = val(b).ptr();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= pb[i];
    return push(std::move(out), wants(a) || wants(b), [a, b](Graph& g, Var self) {
        const Tensor& gy = g.ngrad(self);
        if (g.wants(a)) {
            Tensor& ga = g.grad_buf(a);
            for (int64_t i = 0; i < gy.numel(); ++i) ga[i] += gy[i];
        }
        if (g.wants(b)) {
            Tensor& gb = g.grad_buf(b);
            for (int64_t i = 0; i < gy.numel(); ++i) gb[i] -= gy[i];
        }
    });
}

Graph::Var Graph::mul(Var a, Var b) {
    check_same_shape(a, b, "mul");
    Tensor out = val(a);
    const double* pb = val(b).ptr();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= pb[i];
    return push(std::move(out), wants(a) || wants(b), [a, b](Graph& g, Var self) {
        const Tensor& gy = g.ngrad(self);
        if (g.wants(a)) {
            Tensor& ga = g.grad_buf(a);
            const double* pb = g.val(b).ptr();
            for (int64_t i = 0; i < gy.numel(); ++i) ga[i] += gy[i] * pb[i];
        }
        if (g.wants(b)) {
            Tensor& gb = g.grad_buf(b);
            const double* pa = g.val(a).ptr();
            for (int64_t i = 0; i < gy.numel(); ++i) gb[i] += gy[i] * pa[i];
        }
    });
}

Graph::Var Graph::scale(Var a, double c) {
    Tensor out = val(a);
    for (auto& v : out.data) v *= c;
    return push(std::move(out), wants(a), [a, c](Graph& g, Var self) {
        const Tensor& gy = g.ngrad(self);
        Tensor& ga = g.grad_buf(a);
        for (int64_t i = 0; i < gy.numel(); ++i) ga[i] += c * gy[i];
    });
}

Graph::Var Graph::relu(Var a) {
    Tensor out = val(a);
    for (auto& v : out.data) v = v > 0.0 ? v : 0.0;
    return push(std::move(out), wants(a), [a](Graph& g, Var self) {
        const Tensor& gy = g.ngrad(self);
        const Tensor& x = g.val(a);
        Tensor& ga = g.grad_buf(a);
        for (int64_t i = 0; i < gy.numel(); ++i)
            if (x[i] > 0.0) ga[i] += gy[i];
    });
}

Graph::Var Graph::sigmoid(Var a) {
    Tensor out = val(a);
    for (auto& v : out.data) v = sigmoid_stable(v);
    return push(std::move(out), wants(a), [a](Graph& g, Var self) {
        const Tensor& gy = g.ngrad(self);
        const Tensor& y = g.val(self);
        Tensor& ga = g.grad_buf(a);
        for (int64_t i = 0; i < gy.numel(); ++i) ga[i] += gy[i] * y[i] * (1.0 - y[i]);
    });
}

Graph::Var Graph::gelu(Var a) {
    Tensor out = val(a);
    for (auto& v : out.data) v = gelu_fwd(v);
    return push(std::move(out), wants(a), [a](Graph& g, Var self) {
        const Tensor& gy = g.ngrad(self);
        const Tensor& x = g.val(a);
        Tensor& ga = g.grad_buf(a);
        for (int64_t i = 0; i < gy.numel(); ++i) ga[i] += gy[i] * gelu_dfwd(x[i]);
    });
}

// ---------------- shape ----------------

Graph::Var Graph::reshape(Var a, Shape s) {
    if (shape_numel(s) != val(a).numel())
        throw ShapeError("reshape: numel mismatch " + shape_str(val(a).shape) + " -> " + shape_str(s));
    Tensor out(std::move(s), val(a).data);
    return push(std::move(out), wants(a), [a](Graph& g, Var self) {
        const Tensor& gy = g.ngrad(self);
        Tensor& ga = g.grad_buf(a);
        for (int64_t i = 0; i < gy.numel(); ++i) ga[i] += gy[i];
    });
}

namespace {
std::vector<int64_t> strides_of(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[static_cast<size_t>(i)] = acc;
        acc *= s[static_cast<size_t>(i)];
    }
    return st;
}

// Visits (flat_output_index, flat_input_index) pairs for a permutation whose
// output shape is `oshape` and whose per-output-axis input strides are `steps`.
template <typename F>
void permute_iterate(const Shape& oshape, const std::vector<int64_t>& steps, F&& f) {
    int r = static_cast<int>(oshape.size());
    std::vector<int> idx(static_cast<size_t>(r), 0);
    int64_t n = shape_numel(oshape);
    int64_t src = 0;
    for (int64_t o = 0; o < n; ++o) {
        f(o, src);
        for (int i = r - 1; i >= 0; --i) {
            idx[static_cast<size_t>(i)]++;
            src += steps[static_cast<size_t>(i)];
            if (idx[static_cast<size_t>(i)] < oshape[static_cast<size_t>(i)]) break;
            src -= steps[static_cast<size_t>(i)] * oshape[static_cast<size_t>(i)];
            idx[static_cast<size_t>(i)] = 0;
        }
    }
}
}  // namespace

Graph::Var Graph::permute(Var a, const std::vector<int>& axes) {
    const Tensor& x = val(a);
    if (static_cast<int>(axes.size()) != x.rank()) throw ShapeError("permute: axes rank mismatch");
    Shape oshape(axes.size());
    auto in_str = strides_of(x.shape);
    std::vector<int64_t> steps(axes.size());
    for (size_t i = 0; i < axes.size(); ++i) {
        oshape[i] = x.dim(axes[i]);
        steps[i] = in_str[static_cast<size_t>(axes[i])];
    }
    Tensor out(oshape);
    permute_iterate(oshape, steps, [&](int64_t o, int64_t src) { out[o] = x[src]; });
    return push(std::move(out), wants(a), [a, oshape, steps](Graph& g, Var self) {
        const Tensor& gy = g.ngrad(self);
        Tensor& ga = g.grad_buf(a);
        permute_iterate(oshape, steps, [&](int64_t o, int64_t src) { ga[src] += gy[o]; });
    });
}

Graph::Var Graph::concat2(Var a, Var b, int axis) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (A.rank() != B.rank()) throw ShapeError("concat2: rank mismatch");
    for (int i = 0; i < A.rank(); ++i)
        if (i != axis && A.dim(i) != B.dim(i))
            throw ShapeError("concat2: shapes " + shape_str(A.shape) + " vs " + shape_str(B.shape));
    Shape os = A.shape;
    os[static_cast<size_t>(axis)] += B.dim(axis);
    int64_t outer = 1;
    for (int i = 0; i < axis; ++i) outer *= A.dim(i);
    int64_t inner = 1;
    for (int i = axis + 1; i < A.rank(); ++i) inner *= A.dim(i);
    int64_t wa = A.dim(axis) * inner, wb = B.dim(axis) * inner;
    Tensor out(os);
    for (int64_t o = 0; o < outer; ++o) {
        std::copy_n(A.ptr() + o * wa, wa, out.ptr() + o * (wa + wb));
        std::copy_n(B.ptr() + o * wb, wb, out.ptr() + o * (wa + wb) + wa);
    }
    return push(std::move(out), wants(a) || wants(b),
                [a, b, outer, wa, wb](Graph& g, Var self) {
                    const Tensor& gy = g.ngrad(self);
                    if (g.wants(a)) {
                        Tensor& ga = g.grad_buf(a);
                        for (int64_t o = 0; o < outer; ++o)
                            for (int64_t i = 0; i < wa; ++i) ga[o * wa + i] += gy[o * (wa + wb) + i];
                    }
                    if (g.wants(b)) {
                        Tensor& gb = g.grad_buf(b);
                        for (int64_t o = 0; o < outer; ++o)
                            for (int64_t i = 0; i < wb; ++i)
                                gb[o * wb + i] += gy[o * (wa + wb) + wa + i];
                    }
                });
}

Graph::Var Graph::slice(Var a, int axis, int start, int len) {
    const Tensor& A = val(a);
    if (axis < 0 || axis >= A.rank() || start < 0 || len < 0 || start + len > A.dim(axis))
        throw ShapeError("slice: bad range on " + shape_str(A.shape));
    Shape os = A.shape;
    os[static_cast<size_t>(axis)] = len;
    int64_t outer = 1;
    for (int i = 0; i < axis; ++i) outer *= A.dim(i);
    int64_t inner = 1;
    for (int i = axis + 1; i < A.rank(); ++i) inner *= A.dim(i);
    int64_t in_w = A.dim(axis) * inner, out_w = len * inner, off = start * inner;
    Tensor out(os);
    for (int64_t o = 0; o < outer; ++o)
        std::copy_n(A.ptr() + o * in_w + off, out_w, out.ptr() + o * out_w);
    return push(std::move(out), wants(a), [a, outer, in_w, out_w, off](Graph& g, Var self) {
        const Tensor& gy = g.ngrad(self);
        Tensor& ga = g.grad_buf(a);
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < out_w; ++i) ga[o * in_w + off + i] += gy[o * out_w + i];
    });
}

Graph::Var Graph::gather_rows(Var a, std::vector<int> idx) {
    const Tensor& A = val(a);
    if (A.rank() < 1) throw ShapeError("gather_rows: rank >= 1 required");
    int64_t inner = A.numel() / A.dim(0);
    for (int i : idx)
        if (i < 0 || i >= A.dim(0))
            throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range for " +
                             shape_str(A.shape));
    Shape os = A.shape;
    os[0] = static_cast<int>(idx.size());
    Tensor out(os);
    for (size_t r = 0; r < idx.size(); ++r)
        std::copy_n(A.ptr() + static_cast<int64_t>(idx[r]) * inner, inner,
                    out.ptr() + static_cast<int64_t>(r) * inner);
    auto ix = std::make_shared<std::vector<int>>(std::move(idx));
    return push(std::move(out), wants(a), [a, ix, inner](Graph& g, Var self) {
        const Tensor& gy = g.ngrad(self);
        Tensor& ga = g.grad_buf(a);
        for (size_t r = 0; r < ix->size(); ++r) {
            const double* src = gy.ptr() + static_cast<int64_t>(r) * inner;
            double* dst = ga.ptr() + static_cast<int64_t>((*ix)[r]) * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    });
}

Graph::Var Graph::repeat_outer(Var a, int k) {
    const Tensor& A = val(a);
    if (A.rank() < 1 || A.dim(0) != 1) throw ShapeError("repeat_outer expects leading dim 1");
    Shape os = A.shape;
    os[0] = k;
    Tensor out(os);
    int64_t n = A.numel();
    for (int r = 0; r < k; ++r) std::copy_n(A.ptr(), n, out.ptr() + static_cast<int64_t>(r) * n);
    return push(std::move(out), wants(a), [a, k, n](Graph& g, Var self) {
        const Tensor& gy = g.ngrad(self);
        Tensor& ga = g.grad_buf(a);
        for (int r = 0; r < k; ++r)
            for (int64_t i = 0; i < n; ++i) ga[i] += gy[static_cast<int64_t>(r) * n + i];
    });
}

// ---------------- linear algebra ----------------

Graph::Var Graph::matmul(Var a, Var b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
        throw ShapeError("matmul: " + shape_str(A.shape) + " x " + shape_str(B.shape));
    int M = A.dim(0), K = A.dim(1), N = B.dim(1);
    Tensor out({M, N});
    MatM(out.ptr(), M, N).noalias() = CMatM(A.ptr(), M, K) * CMatM(B.ptr(), K, N);
    return push(std::move(out), wants(a) || wants(b), [a, b, M, K, N](Graph& g, Var self) {
        CMatM gy(g.ngrad(self).ptr(), M, N);
        if (g.wants(a)) {
            MatM ga(g.grad_buf(a).ptr(), M, K);
            ga.noalias() += gy * CMatM(g.val(b).ptr(), K, N).transpose();
        }
        if (g.wants(b)) {
            MatM gb(g.grad_buf(b).ptr(), K, N);
            gb.noalias() += CMatM(g.val(a).ptr(), M, K).transpose() * gy;
        }
    });
}

Graph::Var Graph::bmm(Var a, Var b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (A.rank() != 3 || B.rank() != 3 || A.dim(0) != B.dim(0) || A.dim(2) != B.dim(1))
        throw ShapeError("bmm: " + shape_str(A.shape) + " x " + shape_str(B.shape));
    int G = A.dim(0), M = A.dim(1), K = A.dim(2), N = B.dim(2);
    Tensor out({G, M, N});
    for (int g = 0; g < G; ++g)
        MatM(out.ptr() + static_cast<int64_t>(g) * M * N, M, N).noalias() =
            CMatM(A.ptr() + static_cast<int64_t>(g) * M * K, M, K) *
            CMatM(B.ptr() + static_cast<int64_t>(g) * K * N, K, N);
    return push(std::move(out), wants(a) || wants(b), [a, b, G, M, K, N](Graph& g, Var self) {
        const Tensor& gy = g.ngrad(self);
        for (int i = 0; i < G; ++i) {
            CMatM gyi(gy.ptr() + static_cast<int64_t>(i) * M * N, M, N);
            if (g.wants(a)) {
                MatM ga(g.grad_buf(a).ptr() + static_cast<int64_t>(i) * M * K, M, K);
                ga.noalias() += gyi * CMatM(g.val(b).ptr() + static_cast<int64_t>(i) * K * N, K, N).transpose();
            }
            if (g.wants(b)) {
                MatM gb(g.grad_buf(b).ptr() + static_cast<int64_t>(i) * K * N, K, N);
                gb.noalias() += CMatM(g.val(a).ptr() + static_cast<int64_t>(i) * M * K, M, K).transpose() * gyi;
            }
        }
    });
}

Graph::Var Graph::transpose_last2(Var a) {
    const Tensor& A = val(a);
    if (A.rank() == 2) {
        int M = A.dim(0), N = A.dim(1);
        Tensor out({N, M});
        for (int i = 0; i < M; ++i)
            for (int j = 0; j < N; ++j) out.at2(j, i) = A.at2(i, j);
        return push(std::move(out), wants(a), [a, M, N](Graph& g, Var self) {
            const Tensor& gy = g.ngrad(self);
            Tensor& ga = g.grad_buf(a);
            for (int i = 0; i < M; ++i)
                for (int j = 0; j < N; ++j) ga.at2(i, j) += gy.at2(j, i);
        });
    }
    if (A.rank() == 3) {
        int G = A.dim(0), M = A.dim(1), N = A.dim(2);
        Tensor out({G, N, M});
        for (int g = 0; g < G; ++g)
            for (int i = 0; i < M; ++i)
                for (int j = 0; j < N; ++j) out.at3(g, j, i) = A.at3(g, i, j);
        return push(std::move(out), wants(a), [a, G, M, N](Graph& g, Var self) {
            const Tensor& gy = g.ngrad(self);
            Tensor& ga = g.grad_buf(a);
            for (int k = 0; k < G; ++k)
                for (int i = 0; i < M; ++i)
                    for (int j = 0; j < N; ++j) ga.at3(k, i, j) += gy.at3(k, j, i);
        });
    }
    throw ShapeError("transpose_last2: rank must be 2 or 3, got " + shape_str(A.shape));
}

// ---------------- nn ----------------

Graph::Var Graph::linear(Var x, Var w, Var b) {
    const Tensor& X = val(x);
    const Tensor& W = val(w);
    if (W.rank() != 2 || X.rank() < 1 || X.shape.back() != W.dim(0))
        throw ShapeError("linear: " + shape_str(X.shape) + " x " + shape_str(W.shape));
    int K = W.dim(0), N = W.dim(1);
    int64_t M = X.numel() / K;
    Shape os = X.shape;
    os.back() = N;
    Tensor out(os);
    MatM(out.ptr(), M, N).noalias() = CMatM(X.ptr(), M, K) * CMatM(W.ptr(), K, N);
    if (b != kNoVar) {
        const Tensor& B = val(b);
        if (B.numel() != N) throw ShapeError("linear: bias size " + shape_str(B.shape));
        for (int64_t i = 0; i < M; ++i)
            for (int j = 0; j < N; ++j) out[i * N + j] += B[j];
    }
    bool rg = wants(x) || wants(w) || (b != kNoVar && wants(b));
    return push(std::move(out), rg, [x, w, b, M, K, N](Graph& g, Var self) {
        CMatM gy(g.ngrad(self).ptr(), M, N);
        if (g.wants(x)) {
            MatM gx(g.grad_buf(x).ptr(), M, K);
            gx.noalias() += gy * CMatM(g.val(w).ptr(), K, N).transpose();
        }
        if (g.wants(w)) {
            MatM gw(g.grad_buf(w).ptr(), K, N);
            gw.noalias() += CMatM(g.val(x).ptr(), M, K).transpose() * gy;
        }
        if (b != kNoVar && g.wants(b)) {
            Tensor& gb = g.grad_buf(b);
            const Tensor& gyt = g.ngrad(self);
            for (int64_t i = 0; i < M; ++i)
                for (int j = 0; j < N; ++j) gb[j] += gyt[i * N + j];
        }
    });
}

Graph::Var Graph::conv2d(Var x, Var w, Var b, int stride, int pad, int dilation) {
    const Tensor& X = val(x);
    const Tensor& W = val(w);
    if (X.rank() != 4 || W.rank() != 4 || X.dim(1) != W.dim(1))
        throw ShapeError("conv2d: input " + shape_str(X.shape) + " weight " + shape_str(W.shape));
    ConvDims c;
    c.B = X.dim(0); c.Cin = X.dim(1); c.H = X.dim(2); c.W = X.dim(3);
    c.Cout = W.dim(0); c.kh = W.dim(2); c.kw = W.dim(3);
    c.s = stride; c.p = pad; c.d = dilation;
    c.OH = (c.H + 2 * c.p - c.d * (c.kh - 1) - 1) / c.s + 1;
    c.OW = (c.W + 2 * c.p - c.d * (c.kw - 1) - 1) / c.s + 1;
    if (c.OH <= 0 || c.OW <= 0) throw ShapeError("conv2d: empty output for input " + shape_str(X.shape));

    std::vector<double> cols;
    im2col(X, c, cols);
    std::vector<double> out_mat(static_cast<size_t>(c.rows()) * c.Cout);
    MatM(out_mat.data(), c.rows(), c.Cout).noalias() =
        CMatM(cols.data(), c.rows(), c.ksize()) * CMatM(W.ptr(), c.Cout, c.ksize()).transpose();

    Tensor out({c.B, c.Cout, c.OH, c.OW});
    const double* bias = (b != kNoVar) ? val(b).ptr() : nullptr;
    if (bias && val(b).numel() != c.Cout) throw ShapeError("conv2d: bias size");
    int64_t r = 0;
    for (int bi = 0; bi < c.B; ++bi)
        for (int oy = 0; oy < c.OH; ++oy)
            for (int ox = 0; ox < c.OW; ++ox, ++r)
                for (int co = 0; co < c.Cout; ++co)
                    out.at4(bi, co, oy, ox) = out_mat[static_cast<size_t>(r) * c.Cout + co] +
                                              (bias ? bias[co] : 0.0);

    bool rg = wants(x) || wants(w) || (b != kNoVar && wants(b));
    return push(std::move(out), rg, [x, w, b, c](Graph& g, Var self) {
        const Tensor& gy = g.ngrad(self);
        std::vector<double> gy_mat(static_cast<size_t>(c.rows()) * c.Cout);
        int64_t r = 0;
        for (int bi = 0; bi < c.B; ++bi)
            for (int oy = 0; oy < c.OH; ++oy)
                for (int ox = 0; ox < c.OW; ++ox, ++r)
                    for (int co = 0; co < c.Cout; ++co)
                        gy_mat[static_cast<size_t>(r) * c.Cout + co] = gy.at4(bi, co, oy, ox);
        if (g.wants(w)) {
            std::vector<double> cols;
            im2col(g.val(x), c, cols);
            MatM gw(g.grad_buf(w).ptr(), c.Cout, c.ksize());
            gw.noalias() += CMatM(gy_mat.data(), c.rows(), c.Cout).transpose() *
                            CMatM(cols.data(), c.rows(), c.ksize());
        }
        if (b != kNoVar && g.wants(b)) {
            Tensor& gb = g.grad_buf(b);
            for (int64_t i = 0; i < c.rows(); ++i)
                for (int co = 0; co < c.Cout; ++co)
                    gb[co] += gy_mat[static_cast<size_t>(i) * c.Cout + co];
        }
        if (g.wants(x)) {
            std::vector<double> dcols(static_cast<size_t>(c.rows()) * c.ksize());
            MatM(dcols.data(), c.rows(), c.ksize()).noalias() =
                CMatM(gy_mat.data(), c.rows(), c.Cout) * CMatM(g.val(w).ptr(), c.Cout, c.ksize());
            col2im_acc(dcols, c, g.grad_buf(x));
        }
    });
}

Graph::Var Graph::conv_transpose2d(Var x, Var w, Var b, int stride) {
    const Tensor& X = val(x);
    const Tensor& W = val(w);
    if (X.rank() != 4 || W.rank() != 4 || X.dim(1) != W.dim(0))
        throw ShapeError("conv_transpose2d: input " + shape_str(X.shape) + " weight " +
                         shape_str(W.shape));
    int B = X.dim(0), Cin = X.dim(1), H = X.dim(2), Wd = X.dim(3);
    int Cout = W.dim(1), kh = W.dim(2), kw = W.dim(3);
    int OH = (H - 1) * stride + kh, OW = (Wd - 1) * stride + kw;
    int64_t rows = static_cast<int64_t>(B) * H * Wd;
    int ck = Cout * kh * kw;

    // gather x into (rows, Cin)
    std::vector<double> xmat(static_cast<size_t>(rows) * Cin);
    {
        int64_t r = 0;
        for (int bi = 0; bi < B; ++bi)
            for (int iy = 0; iy < H; ++iy)
                for (int ix = 0; ix < Wd; ++ix, ++r)
                    for (int ci = 0; ci < Cin; ++ci)
                        xmat[static_cast<size_t>(r) * Cin + ci] = X.at4(bi, ci, iy, ix);
    }
    std::vector<double> ymat(static_cast<size_t>(rows) * ck);
    MatM(ymat.data(), rows, ck).noalias() =
        CMatM(xmat.data(), rows, Cin) * CMatM(W.ptr(), Cin, ck);

    Tensor out({B, Cout, OH, OW});
    const double* bias = (b != kNoVar) ? val(b).ptr() : nullptr;
    if (bias && val(b).numel() != Cout) throw ShapeError("conv_transpose2d: bias size");
    if (bias) {
        for (int bi = 0; bi < B; ++bi)
            for (int co = 0; co < Cout; ++co) {
                double* o = out.ptr() + ((static_cast<int64_t>(bi) * Cout + co) * OH) * OW;
                for (int64_t i = 0; i < static_cast<int64_t>(OH) * OW; ++i) o[i] = bias[co];
            }
    }
    {
        int64_t r = 0;
        for (int bi = 0; bi < B; ++bi)
            for (int iy = 0; iy < H; ++iy)
                for (int ix = 0; ix < Wd; ++ix, ++r) {
                    const double* row = ymat.data() + static_cast<size_t>(r) * ck;
                    int col = 0;
                    for (int co = 0; co < Cout; ++co)
                        for (int ky = 0; ky < kh; ++ky)
                            for (int kx = 0; kx < kw; ++kx, ++col)
                                out.at4(bi, co, iy * stride + ky, ix * stride + kx) += row[col];
                }
    }

    bool rg = wants(x) || wants(w) || (b != kNoVar && wants(b));
    return push(std::move(out), rg,
                [x, w, b, B, Cin, H, Wd, Cout, kh, kw, stride, rows, ck](Graph& g, Var self) {
                    const Tensor& gy = g.ngrad(self);
                    std::vector<double> gymat(static_cast<size_t>(rows) * ck);
                    {
                        int64_t r = 0;
                        for (int bi = 0; bi < B; ++bi)
                            for (int iy = 0; iy < H; ++iy)
                                for (int ix = 0; ix < Wd; ++ix, ++r) {
                                    double* row = gymat.data() + static_cast<size_t>(r) * ck;
                                    int col = 0;
                                    for (int co = 0; co < Cout; ++co)
                                        for (int ky = 0; ky < kh; ++ky)
                                            for (int kx = 0; kx < kw; ++kx, ++col)
                                                row[col] = gy.at4(bi, co, iy * stride + ky,
                                                                  ix * stride + kx);
                                }
                    }
                    if (g.wants(x)) {
                        std::vector<double> gxmat(static_cast<size_t>(rows) * Cin);
                        MatM(gxmat.data(), rows, Cin).noalias() =
                            CMatM(gymat.data(), rows, ck) * CMatM(g.val(w).ptr(), Cin, ck).transpose();
                        Tensor& gx = g.grad_buf(x);
                        int64_t r = 0;
                        for (int bi = 0; bi < B; ++bi)
                            for (int iy = 0; iy < H; ++iy)
                                for (int ix = 0; ix < Wd; ++ix, ++r)
                                    for (int ci = 0; ci < Cin; ++ci)
                                        gx.at4(bi, ci, iy, ix) +=
                                            gxmat[static_cast<size_t>(r) * Cin + ci];
                    }
                    if (g.wants(w)) {
                        const Tensor& X = g.val(x);
                        std::vector<double> xmat(static_cast<size_t>(rows) * Cin);
                        int64_t r = 0;
                        for (int bi = 0; bi < B; ++bi)
                            for (int iy = 0; iy < H; ++iy)
                                for (int ix = 0; ix < Wd; ++ix, ++r)
                                    for (int ci = 0; ci < Cin; ++ci)
                                        xmat[static_cast<size_t>(r) * Cin + ci] = X.at4(bi, ci, iy, ix);
                        MatM gw(g.grad_buf(w).ptr(), Cin, ck);
                        gw.noalias() += CMatM(xmat.data(), rows, Cin).transpose() *
                                        CMatM(gymat.data(), rows, ck);
                    }
                    if (b != kNoVar && g.wants(b)) {
                        Tensor& gb = g.grad_buf(b);
                        int OH = (H - 1) * stride + kh, OW = (Wd - 1) * stride + kw;
                        for (int bi = 0; bi < B; ++bi)
                            for (int co = 0; co < Cout; ++co) {
                                const double* o = gy.ptr() + ((static_cast<int64_t>(bi) * Cout + co) * OH) * OW;
                                double s = 0.0;
                                for (int64_t i = 0; i < static_cast<int64_t>(OH) * OW; ++i) s += o[i];
                                gb[co] += s;
                            }
                    }
                });
}

Graph::Var Graph::avg_pool2d(Var x, int k) {
    const Tensor& X = val(x);
    if (X.rank() != 4) throw ShapeError("avg_pool2d: rank 4 required");
    int B = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
    if (H % k != 0 || W % k != 0)
        throw ShapeError("avg_pool2d: spatial size " + shape_str(X.shape) +
                         " not divisible by factor " + std::to_string(k));
    int OH = H / k, OW = W / k;
    Tensor out({B, C, OH, OW});
    double inv = 1.0 / (k * k);
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox) {
                    double s = 0.0;
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) s += X.at4(b, c, oy * k + ky, ox * k + kx);
                    out.at4(b, c, oy, ox) = s * inv;
                }
    return push(std::move(out), wants(x), [x, B, C, OH, OW, k, inv](Graph& g, Var self) {
        const Tensor& gy = g.ngrad(self);
        Tensor& gx = g.grad_buf(x);
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c)
                for (int oy = 0; oy < OH; ++oy)
                    for (int ox = 0; ox < OW; ++ox) {
                        double v = gy.at4(b, c, oy, ox) * inv;
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx)
                                gx.at4(b, c, oy * k + ky, ox * k + kx) += v;
                    }
    });
}

Graph::Var Graph::upsample_bilinear(Var x, int out_h, int out_w) {
    const Tensor& X = val(x);
    if (X.rank() != 4) throw ShapeError("upsample_bilinear: rank 4 required");
    int B = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
    auto ay = std::make_shared<BilinearAxis>(bilinear_axis(H, out_h));
    auto ax = std::make_shared<BilinearAxis>(bilinear_axis(W, out_w));
    Tensor out({B, C, out_h, out_w});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int oy = 0; oy < out_h; ++oy)
                for (int ox = 0; ox < out_w; ++ox)
                    out.at4(b, c, oy, ox) =
                        ay->w0[oy] * (ax->w0[ox] * X.at4(b, c, ay->i0[oy], ax->i0[ox]) +
                                      ax->w1[ox] * X.at4(b, c, ay->i0[oy], ax->i1[ox])) +
                        ay->w1[oy] * (ax->w0[ox] * X.at4(b, c, ay->i1[oy], ax->i0[ox]) +
                                      ax->w1[ox] * X.at4(b, c, ay->i1[oy], ax->i1[ox]));
    return push(std::move(out), wants(x), [x, B, C, out_h, out_w, ay, ax](Graph& g, Var self) {
        const Tensor& gy = g.ngrad(self);
        Tensor& gx = g.grad_buf(x);
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c)
                for (int oy = 0; oy < out_h; ++oy)
                    for (int ox = 0; ox < out_w; ++ox) {
                        double v = gy.at4(b, c, oy, ox);
                        gx.at4(b, c, ay->i0[oy], ax->i0[ox]) += ay->w0[oy] * ax->w0[ox] * v;
                        gx.at4(b, c, ay->i0[oy], ax->i1[ox]) += ay->w0[oy] * ax->w1[ox] * v;
                        gx.at4(b, c, ay->i1[oy], ax->i0[ox]) += ay->w1[oy] * ax->w0[ox] * v;
                        gx.at4(b, c, ay->i1[oy], ax->i1[ox]) += ay->w1[oy] * ax->w1[ox] * v;
                    }
    });
}

namespace {
struct LnStats {
    std::vector<double> mu, ivar;
};
}  // namespace

Graph::Var Graph::layernorm_last(Var x, Var gamma, Var beta, double eps) {
    return ln_impl(x, gamma, beta, eps, false);
}

Graph::Var Graph::layernorm_chan(Var x, Var gamma, Var beta, double eps) {
    if (val(x).rank() != 4) throw ShapeError("layernorm_chan: rank 4 required");
    return ln_impl(x, gamma, beta, eps, true);
}

Graph::Var Graph::ln_impl(Var x, Var gamma, Var beta, double eps, bool channel_mode) {
    const Tensor& X = val(x);
    const Tensor& G = val(gamma);
    std::vector<int64_t> bases;
    int len = 0;
    int64_t step = 0;
    if (channel_mode)
        fibers_chan(X.shape, bases, len, step);
    else
        fibers_last(X.shape, bases, len, step);
    if (G.numel() != len || val(beta).numel() != len)
        throw ShapeError("layernorm: scale size " + shape_str(G.shape) + " vs fiber length " +
                         std::to_string(len));

    auto stats = std::make_shared<LnStats>();
    stats->mu.resize(bases.size());
    stats->ivar.resize(bases.size());
    Tensor out(X.shape);
    const double* gp = G.ptr();
    const double* bp = val(beta).ptr();
    for (size_t f = 0; f < bases.size(); ++f) {
        const double* xf = X.ptr() + bases[f];
        double mu = 0.0;
        for (int i = 0; i < len; ++i) mu += xf[static_cast<int64_t>(i) * step];
        mu /= len;
        double var = 0.0;
        for (int i = 0; i < len; ++i) {
            double d = xf[static_cast<int64_t>(i) * step] - mu;
            var += d * d;
        }
        var /= len;
        double ivar = 1.0 / std::sqrt(var + eps);
        stats->mu[f] = mu;
        stats->ivar[f] = ivar;
        double* of = out.ptr() + bases[f];
        for (int i = 0; i < len; ++i) {
            double xhat = (xf[static_cast<int64_t>(i) * step] - mu) * ivar;
            of[static_cast<int64_t>(i) * step] = gp[i] * xhat + bp[i];
        }
    }
    auto bases_sp = std::make_shared<std::vector<int64_t>>(std::move(bases));
    bool rg = wants(x) || wants(gamma) || wants(beta);
    return push(std::move(out), rg,
                [x, gamma, beta, bases_sp, len, step, stats](Graph& g, Var self) {
                    const Tensor& gy = g.ngrad(self);
                    const Tensor& X = g.val(x);
                    const double* gp = g.val(gamma).ptr();
                    bool wx = g.wants(x), wg = g.wants(gamma), wb = g.wants(beta);
                    double* gxp = wx ? g.grad_buf(x).ptr() : nullptr;
                    double* ggp = wg ? g.grad_buf(gamma).ptr() : nullptr;
                    double* gbp = wb ? g.grad_buf(beta).ptr() : nullptr;
                    std::vector<double> dxhat(static_cast<size_t>(len));
                    for (size_t f = 0; f < bases_sp->size(); ++f) {
                        int64_t base = (*bases_sp)[f];
                        const double* xf = X.ptr() + base;
                        const double* gyf = gy.ptr() + base;
                        double mu = stats->mu[f], ivar = stats->ivar[f];
                        double s1 = 0.0, s2 = 0.0;
                        for (int i = 0; i < len; ++i) {
                            double xhat = (xf[static_cast<int64_t>(i) * step] - mu) * ivar;
                            double gv = gyf[static_cast<int64_t>(i) * step];
                            dxhat[static_cast<size_t>(i)] = gv * gp[i];
                            s1 += dxhat[static_cast<size_t>(i)];
                            s2 += dxhat[static_cast<size_t>(i)] * xhat;
                            if (wg) ggp[i] += gv * xhat;
                            if (wb) gbp[i] += gv;
                        }
                        if (wx) {
                            double invlen = 1.0 / len;
                            for (int i = 0; i < len; ++i) {
                                double xhat = (xf[static_cast<int64_t>(i) * step] - mu) * ivar;
                                gxp[base + static_cast<int64_t>(i) * step] +=
                                    ivar * (dxhat[static_cast<size_t>(i)] - s1 * invlen -
                                            xhat * s2 * invlen);
                            }
                        }
                    }
                });
}

Graph::Var Graph::softmax_last(Var x) {
    const Tensor& X = val(x);
    int C = X.shape.back();
    int64_t rows = X.numel() / C;
    Tensor out(X.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = X.ptr() + r * C;
        double* yr = out.ptr() + r * C;
        double mx = xr[0];
        for (int i = 1; i < C; ++i) mx = std::max(mx, xr[i]);
        double s = 0.0;
        for (int i = 0; i < C; ++i) {
            yr[i] = std::exp(xr[i] - mx);
            s += yr[i];
        }
        double inv = 1.0 / s;
        for (int i = 0; i < C; ++i) yr[i] *= inv;
    }
    return push(std::move(out), wants(x), [x, rows, C](Graph& g, Var self) {
        const Tensor& gy = g.ngrad(self);
        const Tensor& y = g.val(self);
        Tensor& gx = g.grad_buf(x);
        for (int64_t r = 0; r < rows; ++r) {
            const double* yr = y.ptr() + r * C;
            const double* gr = gy.ptr() + r * C;
            double dot = 0.0;
            for (int i = 0; i < C; ++i) dot += gr[i] * yr[i];
            double* gxr = gx.ptr() + r * C;
            for (int i = 0; i < C; ++i) gxr[i] += yr[i] * (gr[i] - dot);
        }
    });
}

Graph::Var Graph::gap2d(Var x) {
    const Tensor& X = val(x);
    if (X.rank() != 4) throw ShapeError("gap2d: rank 4 required");
    int B = X.dim(0), C = X.dim(1);
    int64_t hw = static_cast<int64_t>(X.dim(2)) * X.dim(3);
    Tensor out({B, C});
    double inv = 1.0 / static_cast<double>(hw);
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const double* p = X.ptr() + (static_cast<int64_t>(b) * C + c) * hw;
            double s = 0.0;
            for (int64_t i = 0; i < hw; ++i) s += p[i];
            out.at2(b, c) = s * inv;
        }
    return push(std::move(out), wants(x), [x, B, C, hw, inv](Graph& g, Var self) {
        const Tensor& gy = g.ngrad(self);
        Tensor& gx = g.grad_buf(x);
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                double v = gy.at2(b, c) * inv;
                double* p = gx.ptr() + (static_cast<int64_t>(b) * C + c) * hw;
                for (int64_t i = 0; i < hw; ++i) p[i] += v;
            }
    });
}

Graph::Var Graph::mul_channel(Var x, Var s) {
    const Tensor& X = val(x);
    const Tensor& S = val(s);
    if (X.rank() != 4 || S.rank() != 2 || S.dim(0) != X.dim(0) || S.dim(1) != X.dim(1))
        throw ShapeError("mul_channel: " + shape_str(X.shape) + " vs " + shape_str(S.shape));
    int B = X.dim(0), C = X.dim(1);
    int64_t hw = static_cast<int64_t>(X.dim(2)) * X.dim(3);
    Tensor out(X.shape);
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            double sv = S.at2(b, c);
            const double* xp = X.ptr() + (static_cast<int64_t>(b) * C + c) * hw;
            double* op = out.ptr() + (static_cast<int64_t>(b) * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) op[i] = xp[i] * sv;
        }
    return push(std::move(out), wants(x) || wants(s), [x, s, B, C, hw](Graph& g, Var self) {
        const Tensor& gy = g.ngrad(self);
        if (g.wants(x)) {
            Tensor& gx = g.grad_buf(x);
            const Tensor& S = g.val(s);
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    double sv = S.at2(b, c);
                    const double* gp = gy.ptr() + (static_cast<int64_t>(b) * C + c) * hw;
                    double* gxp = gx.ptr() + (static_cast<int64_t>(b) * C + c) * hw;
                    for (int64_t i = 0; i < hw; ++i) gxp[i] += gp[i] * sv;
                }
        }
        if (g.wants(s)) {
            Tensor& gs = g.grad_buf(s);
            const Tensor& X = g.val(x);
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    const double* gp = gy.ptr() + (static_cast<int64_t>(b) * C + c) * hw;
                    const double* xp = X.ptr() + (static_cast<int64_t>(b) * C + c) * hw;
                    double acc = 0.0;
                    for (int64_t i = 0; i < hw; ++i) acc += gp[i] * xp[i];
                    gs.at2(b, c) += acc;
                }
        }
    });
}

// ---------------- reductions / losses ----------------

Graph::Var Graph::sum_all(Var x) {
    const Tensor& X = val(x);
    double s = 0.0;
    for (double v : X.data) s += v;
    return push(Tensor::scalar(s), wants(x), [x](Graph& g, Var self) {
        double gy = g.ngrad(self)[0];
        Tensor& gx = g.grad_buf(x);
        for (auto& v : gx.data) v += gy;
    });
}

Graph::Var Graph::mean_all(Var x) {
    const Tensor& X = val(x);
    double inv = 1.0 / static_cast<double>(X.numel());
    double s = 0.0;
    for (double v : X.data) s += v;
    return push(Tensor::scalar(s * inv), wants(x), [x, inv](Graph& g, Var self) {
        double gy = g.ngrad(self)[0] * inv;
        Tensor& gx = g.grad_buf(x);
        for (auto& v : gx.data) v += gy;
    });
}

Graph::Var Graph::bce_logits_mean(Var logits, Tensor targets) {
    const Tensor& Z = val(logits);
    if (Z.shape != targets.shape)
        throw ShapeError("bce_logits_mean: logits " + shape_str(Z.shape) + " vs targets " +
                         shape_str(targets.shape));
    int64_t n = Z.numel();
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double z = Z[i], t = targets[i];
        loss += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::fabs(z)));
    }
    loss /= static_cast<double>(n);
    auto tg = std::make_shared<Tensor>(std::move(targets));
    return push(Tensor::scalar(loss), wants(logits), [logits, tg, n](Graph& g, Var self) {
        double gy = g.ngrad(self)[0] / static_cast<double>(n);
        const Tensor& Z = g.val(logits);
        Tensor& gz = g.grad_buf(logits);
        for (int64_t i = 0; i < n; ++i) gz[i] += gy * (sigmoid_stable(Z[i]) - (*tg)[i]);
    });
}

Graph::Var Graph::mse_mean(Var pred, Tensor target) {
    const Tensor& P = val(pred);
    if (P.shape != target.shape)
        throw ShapeError("mse_mean: pred " + shape_str(P.shape) + " vs target " +
                         shape_str(target.shape));
    int64_t n = P.numel();
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double d = P[i] - target[i];
        loss += d * d;
    }
    loss /= static_cast<double>(n);
    auto tg = std::make_shared<Tensor>(std::move(target));
    return push(Tensor::scalar(loss), wants(pred), [pred, tg, n](Graph& g, Var self) {
        double gy = g.ngrad(self)[0] * 2.0 / static_cast<double>(n);
        const Tensor& P = g.val(pred);
        Tensor& gp = g.grad_buf(pred);
        for (int64_t i = 0; i < n; ++i) gp[i] += gy * (P[i] - (*tg)[i]);
    });
}

Graph::Var Graph::smooth_l1_mean(Var pred, Tensor target, double beta) {
    const Tensor& P = val(pred);
    if (P.shape != target.shape)
        throw ShapeError("smooth_l1_mean: pred " + shape_str(P.shape) + " vs target " +
                         shape_str(target.shape));
    int64_t n = P.numel();
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double d = P[i] - target[i];
        double a = std::fabs(d);
        loss += (a < beta) ? 0.5 * d * d / beta : a - 0.5 * beta;
    }
    loss /= static_cast<double>(n);
    auto tg = std::make_shared<Tensor>(std::move(target));
    return push(Tensor::scalar(loss), wants(pred), [pred, tg, n, beta](Graph& g, Var self) {
        double gy = g.ngrad(self)[0] / static_cast<double>(n);
        const Tensor& P = g.val(pred);
        Tensor& gp = g.grad_buf(pred);
        for (int64_t i = 0; i < n; ++i) {
            double d = P[i] - (*tg)[i];
            double dd = (std::fabs(d) < beta) ? d / beta : (d > 0 ? 1.0 : -1.0);
            gp[i] += gy * dd;
        }
    });
}

Graph::Var Graph::softmax_ce_mean(Var logits, const std::vector<int>& labels) {
    const Tensor& Z = val(logits);
    if (Z.rank() != 2 || static_cast<size_t>(Z.dim(0)) != labels.size())
        throw ShapeError("softmax_ce_mean: logits " + shape_str(Z.shape) + " vs " +
                         std::to_string(labels.size()) + " labels");
    int K = Z.dim(0), n = Z.dim(1);
    double loss = 0.0;
    for (int r = 0; r < K; ++r) {
        const double* zr = Z.ptr() + static_cast<int64_t>(r) * n;
        double mx = zr[0];
        for (int i = 1; i < n; ++i) mx = std::max(mx, zr[i]);
        double s = 0.0;
        for (int i = 0; i < n; ++i) s += std::exp(zr[i] - mx);
        loss += std::log(s) + mx - zr[labels[static_cast<size_t>(r)]];
    }
    loss /= K;
    auto lab = std::make_shared<std::vector<int>>(labels);
    return push(Tensor::scalar(loss), wants(logits), [logits, lab, K, n](Graph& g, Var self) {
        double gy = g.ngrad(self)[0] / K;
        const Tensor& Z = g.val(logits);
        Tensor& gz = g.grad_buf(logits);
        for (int r = 0; r < K; ++r) {
            const double* zr = Z.ptr() + static_cast<int64_t>(r) * n;
            double mx = zr[0];
            for (int i = 1; i < n; ++i) mx = std::max(mx, zr[i]);
            double s = 0.0;
            for (int i = 0; i < n; ++i) s += std::exp(zr[i] - mx);
            for (int i = 0; i < n; ++i) {
                double p = std::exp(zr[i] - mx) / s;
                gz[static_cast<int64_t>(r) * n + i] +=
                    gy * (p - (i == (*lab)[static_cast<size_t>(r)] ? 1.0 : 0.0));
            }
        }
    });
}

}  // namespace spda
