#include <cmath>

#include "doctest.h"
#include "spda/errors.hpp"
#include "spda/graph.hpp"
#include "testutil.hpp"

using namespace spda;
using testutil::grad_check_inputs;
using testutil::max_abs_diff;
using testutil::random_tensor;

namespace {
constexpr double kGradTol = 1e-4;

Graph::Var sum_of(Graph& g, Graph::Var v) { return g.sum_all(v); }

// Weighted sum against a fixed random cotangent so non-symmetric outputs are
// exercised (plain sums hide sign errors that cancel).
Graph::Var weighted_sum(Graph& g, Graph::Var v, uint64_t seed) {
    Rng r(seed);
    Tensor w(g.value(v).shape);
    fill_uniform(w, r, -1.0, 1.0);
    return g.sum_all(g.mul(v, g.constant(std::move(w))));
}
}  // namespace

TEST_CASE("elementwise ops: values and gradients") {
    Rng rng(11);
    Tensor a = random_tensor({2, 3, 4}, rng);
    Tensor b = random_tensor({2, 3, 4}, rng);

    CHECK(grad_check_inputs([](Graph& g, const std::vector<Graph::Var>& v) {
              return weighted_sum(g, g.add(v[0], v[1]), 1);
          }, {a, b}) < kGradTol);
    CHECK(grad_check_inputs([](Graph& g, const std::vector<Graph::Var>& v) {
              return weighted_sum(g, g.sub(v[0], v[1]), 2);
          }, {a, b}) < kGradTol);
    CHECK(grad_check_inputs([](Graph& g, const std::vector<Graph::Var>& v) {
              return weighted_sum(g, g.mul(v[0], v[1]), 3);
          }, {a, b}) < kGradTol);
    CHECK(grad_check_inputs([](Graph& g, const std::vector<Graph::Var>& v) {
              return weighted_sum(g, g.scale(v[0], -2.5), 4);
          }, {a}) < kGradTol);
    CHECK(grad_check_inputs([](Graph& g, const std::vector<Graph::Var>& v) {
              return weighted_sum(g, g.sigmoid(v[0]), 5);
          }, {a}) < kGradTol);
    CHECK(grad_check_inputs([](Graph& g, const std::vector<Graph::Var>& v) {
              return weighted_sum(g, g.gelu(v[0]), 6);
          }, {a}) < kGradTol);
    CHECK(grad_check_inputs([](Graph& g, const std::vector<Graph::Var>& v) {
              return weighted_sum(g, g.relu(v[0]), 7);
          }, {a}) < kGradTol);
}

TEST_CASE("shape ops: gradients flow through views") {
    Rng rng(12);
    Tensor a = random_tensor({2, 3, 4}, rng);
    Tensor b = random_tensor({2, 5, 4}, rng);

    CHECK(grad_check_inputs([](Graph& g, const std::vector<Graph::Var>& v) {
              return weighted_sum(g, g.reshape(v[0], {4, 6}), 1);
          }, {a}) < kGradTol);
    CHECK(grad_check_inputs([](Graph& g, const std::vector<Graph::Var>& v) {
              return weighted_sum(g, g.permute(v[0], {2, 0, 1}), 2);
          }, {a}) < kGradTol);
    CHECK(grad_check_inputs([](Graph& g, const std::vector<Graph::Var>& v) {
              return weighted_sum(g, g.concat2(v[0], v[1], 1), 3);
          }, {a, b}) < kGradTol);
    CHECK(grad_check_inputs([](Graph& g, const std::vector<Graph::Var>& v) {
              return weighted_sum(g, g.slice(v[0], 1, 1, 2), 4);
          }, {a}) < kGradTol);

    Tensor one = random_tensor({1, 3, 2}, rng);
    CHECK(grad_check_inputs([](Graph& g, const std::vector<Graph::Var>& v) {
              return weighted_sum(g, g.repeat_outer(v[0], 4), 5);
          }, {one}) < kGradTol);

    SUBCASE("permute value correctness") {
        Graph g;
        Graph::Var x = g.leaf(a, false);
        Graph::Var p = g.permute(x, {2, 0, 1});
        const Tensor& y = g.value(p);
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 3; ++j)
                for (int k = 0; k < 4; ++k) CHECK(y.at3(k, i, j) == a.at3(i, j, k));
    }
}

TEST_CASE("matmul family: values and gradients") {
    Rng rng(13);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 5}, rng);

    SUBCASE("matmul value vs loop") {
        Graph g;
        const Tensor& y = g.value(g.matmul(g.leaf(a, false), g.leaf(b, false)));
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 5; ++j) {
                double s = 0;
                for (int k = 0; k < 4; ++k) s += a.at2(i, k) * b.at2(k, j);
                CHECK(y.at2(i, j) == doctest::Approx(s).epsilon(1e-12));
            }
    }

    CHECK(grad_check_inputs([](Graph& g, const std::vector<Graph::Var>& v) {
              return weighted_sum(g, g.matmul(v[0], v[1]), 1);
          }, {a, b}) < kGradTol);

    Tensor ba = random_tensor({3, 2, 4}, rng);
    Tensor bb = random_tensor({3, 4, 5}, rng);
    CHECK(grad_check_inputs([](Graph& g, const std::vector<Graph::Var>& v) {
              return weighted_sum(g, g.bmm(v[0], v[1]), 2);
          }, {ba, bb}) < kGradTol);
    CHECK(grad_check_inputs([](Graph& g, const std::vector<Graph::Var>& v) {
              return weighted_sum(g, g.transpose_last2(v[0]), 3);
          }, {ba}) < kGradTol);

    Tensor x = random_tensor({2, 3, 4}, rng);
    Tensor w = random_tensor({4, 6}, rng);
    Tensor bias = random_tensor({6}, rng);
    CHECK(grad_check_inputs([](Graph& g, const std::vector<Graph::Var>& v) {
              return weighted_sum(g, g.linear(v[0], v[1], v[2]), 4);
          }, {x, w, bias}) < kGradTol);
}

namespace {
// Plain quintuple-loop conv oracle.
Tensor conv2d_loop(const Tensor& x, const Tensor& w, const Tensor* b, int s, int p, int d) {
    int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    int Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    int OH = (H + 2 * p - d * (kh - 1) - 1) / s + 1;
    int OW = (W + 2 * p - d * (kw - 1) - 1) / s + 1;
    Tensor y({B, Cout, OH, OW});
    for (int bi = 0; bi < B; ++bi)
        for (int co = 0; co < Cout; ++co)
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox) {
                    double acc = b ? (*b)[co] : 0.0;
                    for (int ci = 0; ci < Cin; ++ci)
                        for (int ky = 0; ky < kh; ++ky)
                            for (int kx = 0; kx < kw; ++kx) {
                                int iy = oy * s - p + ky * d, ix = ox * s - p + kx * d;
                                if (iy >= 0 && iy < H && ix >= 0 && ix < W)
                                    acc += x.at4(bi, ci, iy, ix) * w.at4(co, ci, ky, kx);
                            }
                    y.at4(bi, co, oy, ox) = acc;
                }
    return y;
}

Tensor convt2d_loop(const Tensor& x, const Tensor& w, const Tensor* b, int s) {
    int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    int Cout = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    int OH = (H - 1) * s + kh, OW = (W - 1) * s + kw;
    Tensor y({B, Cout, OH, OW});
    if (b)
        for (int bi = 0; bi < B; ++bi)
            for (int co = 0; co < Cout; ++co)
                for (int oy = 0; oy < OH; ++oy)
                    for (int ox = 0; ox < OW; ++ox) y.at4(bi, co, oy, ox) = (*b)[co];
    for (int bi = 0; bi < B; ++bi)
        for (int ci = 0; ci < Cin; ++ci)
            for (int iy = 0; iy < H; ++iy)
                for (int ix = 0; ix < W; ++ix)
                    for (int co = 0; co < Cout; ++co)
                        for (int ky = 0; ky < kh; ++ky)
                            for (int kx = 0; kx < kw; ++kx)
                                y.at4(bi, co, iy * s + ky, ix * s + kx) +=
                                    x.at4(bi, ci, iy, ix) * w.at4(ci, co, ky, kx);
    return y;
}
}  // namespace

TEST_CASE("conv2d matches loop oracle and gradients") {
    Rng rng(14);
    struct Case {
        int s, p, d;
    };
    for (Case c : {Case{1, 1, 1}, Case{2, 0, 1}, Case{1, 2, 2}, Case{8, 0, 1}}) {
        Tensor x = random_tensor({2, 3, 8, 8}, rng);
        Tensor w = random_tensor({4, 3, c.s == 8 ? 8 : 3, c.s == 8 ? 8 : 3}, rng, -0.5, 0.5);
        Tensor b = random_tensor({4}, rng);
        Graph g;
        const Tensor& y =
            g.value(g.conv2d(g.leaf(x, false), g.leaf(w, false), g.leaf(b, false), c.s, c.p, c.d));
        Tensor ref = conv2d_loop(x, w, &b, c.s, c.p, c.d);
        CHECK(y.shape == ref.shape);
        CHECK(max_abs_diff(y, ref) < 1e-12);

        CHECK(grad_check_inputs([c](Graph& gg, const std::vector<Graph::Var>& v) {
                  return weighted_sum(gg, gg.conv2d(v[0], v[1], v[2], c.s, c.p, c.d), 9);
              }, {x, w, b}) < kGradTol);
    }
}

TEST_CASE("conv_transpose2d matches loop oracle and gradients") {
    Rng rng(15);
    Tensor x = random_tensor({2, 3, 4, 4}, rng);
    Tensor w = random_tensor({3, 5, 2, 2}, rng, -0.5, 0.5);
    Tensor b = random_tensor({5}, rng);
    Graph g;
    const Tensor& y =
        g.value(g.conv_transpose2d(g.leaf(x, false), g.leaf(w, false), g.leaf(b, false), 2));
    Tensor ref = convt2d_loop(x, w, &b, 2);
    CHECK(y.shape == ref.shape);
    CHECK(max_abs_diff(y, ref) < 1e-12);

    CHECK(grad_check_inputs([](Graph& gg, const std::vector<Graph::Var>& v) {
              return weighted_sum(gg, gg.conv_transpose2d(v[0], v[1], v[2], 2), 10);
          }, {x, w, b}) < kGradTol);
}

TEST_CASE("pooling and resize") {
    Rng rng(16);
    Tensor x = random_tensor({2, 3, 6, 6}, rng);

    SUBCASE("avg_pool2d value") {
        Graph g;
        const Tensor& y = g.value(g.avg_pool2d(g.leaf(x, false), 2));
        CHECK(y.shape == Shape{2, 3, 3, 3});
        double v = 0.25 * (x.at4(1, 2, 2, 4) + x.at4(1, 2, 2, 5) + x.at4(1, 2, 3, 4) +
                           x.at4(1, 2, 3, 5));
        CHECK(y.at4(1, 2, 1, 2) == doctest::Approx(v).epsilon(1e-13));
    }
    SUBCASE("avg_pool2d rejects non-divisible size") {
        Graph g;
        CHECK_THROWS_AS((void)g.avg_pool2d(g.leaf(random_tensor({1, 1, 5, 6}, rng), false), 2),
                        ShapeError);
    }

    CHECK(grad_check_inputs([](Graph& g, const std::vector<Graph::Var>& v) {
              return weighted_sum(g, g.avg_pool2d(v[0], 3), 1);
          }, {x}) < kGradTol);
    CHECK(grad_check_inputs([](Graph& g, const std::vector<Graph::Var>& v) {
              return weighted_sum(g, g.upsample_bilinear(v[0], 12, 9), 2);
          }, {x}) < kGradTol);
    CHECK(grad_check_inputs([](Graph& g, const std::vector<Graph::Var>& v) {
              return weighted_sum(g, g.upsample_bilinear(v[0], 3, 4), 3);
          }, {x}) < kGradTol);

    SUBCASE("bilinear identity at same size") {
        Graph g;
        const Tensor& y = g.value(g.upsample_bilinear(g.leaf(x, false), 6, 6));
        CHECK(max_abs_diff(y, x) < 1e-14);
    }
}

TEST_CASE("normalization and softmax") {
    Rng rng(17);
    Tensor x = random_tensor({2, 5, 3}, rng);
    Tensor gamma = random_tensor({3}, rng, 0.5, 1.5);
    Tensor beta = random_tensor({3}, rng);

    CHECK(grad_check_inputs([](Graph& g, const std::vector<Graph::Var>& v) {
              return weighted_sum(g, g.layernorm_last(v[0], v[1], v[2]), 1);
          }, {x, gamma, beta}) < kGradTol);

    Tensor xc = random_tensor({2, 4, 3, 3}, rng);
    Tensor gc = random_tensor({4}, rng, 0.5, 1.5);
    Tensor bc = random_tensor({4}, rng);
    CHECK(grad_check_inputs([](Graph& g, const std::vector<Graph::Var>& v) {
              return weighted_sum(g, g.layernorm_chan(v[0], v[1], v[2]), 2);
          }, {xc, gc, bc}) < kGradTol);

    SUBCASE("layernorm normalizes fibers") {
        Graph g;
        Tensor ones = Tensor::full({3}, 1.0);
        Tensor zeros = Tensor::zeros({3});
        const Tensor& y = g.value(
            g.layernorm_last(g.leaf(x, false), g.leaf(ones, false), g.leaf(zeros, false)));
        for (int r = 0; r < 10; ++r) {
            double mu = (y[r * 3] + y[r * 3 + 1] + y[r * 3 + 2]) / 3.0;
            CHECK(std::fabs(mu) < 1e-9);
        }
    }

    CHECK(grad_check_inputs([](Graph& g, const std::vector<Graph::Var>& v) {
              return weighted_sum(g, g.softmax_last(v[0]), 3);
          }, {x}) < kGradTol);

    SUBCASE("softmax rows sum to one") {
        Graph g;
        const Tensor& y = g.value(g.softmax_last(g.leaf(x, false)));
        for (int r = 0; r < 10; ++r) {
            double s = y[r * 3] + y[r * 3 + 1] + y[r * 3 + 2];
            CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
        }
    }
}

TEST_CASE("channel ops") {
    Rng rng(18);
    Tensor x = random_tensor({2, 3, 4, 4}, rng);
    Tensor s = random_tensor({2, 3}, rng);
    CHECK(grad_check_inputs([](Graph& g, const std::vector<Graph::Var>& v) {
              return weighted_sum(g, g.gap2d(v[0]), 1);
          }, {x}) < kGradTol);
    CHECK(grad_check_inputs([](Graph& g, const std::vector<Graph::Var>& v) {
              return weighted_sum(g, g.mul_channel(v[0], v[1]), 2);
          }, {x, s}) < kGradTol);
}

TEST_CASE("losses: hand values and gradients") {
    Rng rng(19);
    Tensor z = random_tensor({3, 4}, rng, -2.0, 2.0);
    Tensor t(z.shape);
    for (auto& v : t.data) v = rng.uniform() < 0.5 ? 0.0 : 1.0;

    SUBCASE("bce matches elementwise hand sum") {
        Graph g;
        double got = g.value(g.bce_logits_mean(g.leaf(z, false), t))[0];
        double want = 0.0;
        for (int64_t i = 0; i < z.numel(); ++i) {
            double p = 1.0 / (1.0 + std::exp(-z[i]));
            want += -(t[i] * std::log(p) + (1.0 - t[i]) * std::log(1.0 - p));
        }
        want /= static_cast<double>(z.numel());
        CHECK(got == doctest::Approx(want).epsilon(1e-10));
    }

    CHECK(grad_check_inputs([&](Graph& g, const std::vector<Graph::Var>& v) {
              return g.bce_logits_mean(v[0], t);
          }, {z}) < kGradTol);

    Tensor target = random_tensor({6}, rng);
    Tensor pred = random_tensor({6}, rng);
    CHECK(grad_check_inputs([&](Graph& g, const std::vector<Graph::Var>& v) {
              return g.mse_mean(v[0], target);
          }, {pred}) < kGradTol);
    CHECK(grad_check_inputs([&](Graph& g, const std::vector<Graph::Var>& v) {
              return g.smooth_l1_mean(v[0], target);
          }, {pred}) < kGradTol);

    Tensor logits = random_tensor({4, 3}, rng);
    std::vector<int> labels = {0, 2, 1, 2};
    CHECK(grad_check_inputs([&](Graph& g, const std::vector<Graph::Var>& v) {
              return g.softmax_ce_mean(v[0], labels);
          }, {logits}) < kGradTol);

    CHECK(grad_check_inputs([](Graph& g, const std::vector<Graph::Var>& v) {
              return g.mean_all(v[0]);
          }, {pred}) < kGradTol);
}

TEST_CASE("grad accumulates when a var is used twice") {
    Rng rng(20);
    Tensor a = random_tensor({3, 3}, rng);
    CHECK(grad_check_inputs([](Graph& g, const std::vector<Graph::Var>& v) {
              return g.sum_all(g.matmul(v[0], v[0]));
          }, {a}) < kGradTol);
    CHECK(grad_check_inputs([](Graph& g, const std::vector<Graph::Var>& v) {
              Graph::Var s = g.sigmoid(v[0]);
              return g.sum_all(g.mul(s, g.add(s, v[0])));
          }, {a}) < kGradTol);
}

TEST_CASE("param leaves are cached per graph") {
    ParamTensor p;
    p.name = "w";
    p.value = Tensor::full({2, 2}, 1.5);
    Graph g;
    Graph::Var v1 = g.param(p);
    Graph::Var v2 = g.param(p);
    CHECK(v1 == v2);
    Graph::Var root = g.sum_all(g.add(v1, v2));
    g.backward(root);
    // used twice -> grad of 2 per element
    Tensor gr = g.grad_of(v1);
    for (int64_t i = 0; i < gr.numel(); ++i) CHECK(gr[i] == doctest::Approx(2.0));
    CHECK(g.param_vars().size() == 1);
}

TEST_CASE("backward demands scalar root") {
    Graph g;
    Graph::Var v = g.leaf(Tensor::zeros({2, 2}), true);
    CHECK_THROWS_AS(g.backward(v), ShapeError);
}

TEST_CASE("shape errors carry both shapes") {
    Graph g;
    Graph::Var a = g.leaf(Tensor::zeros({2, 3}), false);
    Graph::Var b = g.leaf(Tensor::zeros({3, 3}), false);
    CHECK_THROWS_WITH_AS((void)g.add(a, b), doctest::Contains("[2x3]"), ShapeError);
    CHECK_THROWS_AS((void)g.matmul(a, a), ShapeError);
}
