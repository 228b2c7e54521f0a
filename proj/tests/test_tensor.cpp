#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "latgen/rng.hpp"
#include "latgen/tensor.hpp"

using namespace latgen;

namespace {

double rel_err(double a, double b) {
    // near-zero values compare by absolute difference (central FD noise floor)
    if (std::abs(a - b) <= 1e-7) return 0.0;
    return std::abs(a - b) / std::max(std::abs(a), std::abs(b));
}

// Scalar projection sum(out . r) so every output element participates in the
// gradient checks with a generic scalar loss.
Var project(Graph& g, Var out, const Tensor& r) {
    return g.sum(g.mul(out, g.constant(r)));
}

struct OpCase {
    std::string name;
    // builds fresh random inputs for a given seed
    std::function<std::vector<Tensor>(Rng&)> inputs;
    std::function<Var(Graph&, const std::vector<Var>&)> build;
};

Tensor randn_pos(std::vector<int64_t> shape, Rng& rng, double lo = 0.2, double hi = 1.5) {
    Tensor t(shape);
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

// every differentiable op in the engine, exercised at small sizes
std::vector<OpCase> op_cases() {
    std::vector<OpCase> cases;
    auto rn = [](std::vector<int64_t> s, Rng& rng) {
        Tensor t = Tensor::randn(s, rng);
        t.requires_grad = true;
        return t;
    };

    cases.push_back({"add",
                     [rn](Rng& r) { return std::vector<Tensor>{rn({2, 3}, r), rn({2, 3}, r)}; },
                     [](Graph& g, const std::vector<Var>& v) { return g.add(v[0], v[1]); }});
    cases.push_back({"sub",
                     [rn](Rng& r) { return std::vector<Tensor>{rn({2, 3}, r), rn({2, 3}, r)}; },
                     [](Graph& g, const std::vector<Var>& v) { return g.sub(v[0], v[1]); }});
    cases.push_back({"mul",
                     [rn](Rng& r) { return std::vector<Tensor>{rn({2, 3}, r), rn({2, 3}, r)}; },
                     [](Graph& g, const std::vector<Var>& v) { return g.mul(v[0], v[1]); }});
    cases.push_back({"scale",
                     [rn](Rng& r) { return std::vector<Tensor>{rn({5}, r)}; },
                     [](Graph& g, const std::vector<Var>& v) { return g.scale(v[0], -1.7); }});
    cases.push_back({"add_scalar",
                     [rn](Rng& r) { return std::vector<Tensor>{rn({5}, r)}; },
                     [](Graph& g, const std::vector<Var>& v) { return g.add_scalar(v[0], 0.4); }});
    cases.push_back(
        {"mul_scalar_var",
         [rn](Rng& r) { return std::vector<Tensor>{rn({2, 4}, r), rn({1}, r)}; },
         [](Graph& g, const std::vector<Var>& v) { return g.mul_scalar_var(v[0], v[1]); }});
    cases.push_back({"exp",
                     [rn](Rng& r) { return std::vector<Tensor>{rn({2, 3}, r)}; },
                     [](Graph& g, const std::vector<Var>& v) { return g.exp(v[0]); }});
    cases.push_back({"silu",
                     [rn](Rng& r) { return std::vector<Tensor>{rn({7}, r)}; },
                     [](Graph& g, const std::vector<Var>& v) { return g.silu(v[0]); }});
    cases.push_back({"leaky_relu",
                     [](Rng& r) {
                         Tensor t({7});
                         for (double& v : t.data) {
                             v = r.uniform(0.1, 1.0);
                             if (r.bernoulli(0.5)) v = -v; // keep away from the kink
                         }
                         t.requires_grad = true;
                         return std::vector<Tensor>{t};
                     },
                     [](Graph& g, const std::vector<Var>& v) { return g.leaky_relu(v[0], 0.2); }});
    cases.push_back({"snake",
                     [rn](Rng& r) {
                         Tensor alpha = randn_pos({3}, r);
                         alpha.requires_grad = true;
                         return std::vector<Tensor>{rn({2, 3, 5}, r), alpha};
                     },
                     [](Graph& g, const std::vector<Var>& v) { return g.snake(v[0], v[1]); }});
    cases.push_back({"reshape",
                     [rn](Rng& r) { return std::vector<Tensor>{rn({2, 6}, r)}; },
                     [](Graph& g, const std::vector<Var>& v) { return g.reshape(v[0], {3, 4}); }});
    cases.push_back({"concat_last",
                     [rn](Rng& r) {
                         return std::vector<Tensor>{rn({2, 2, 3}, r), rn({2, 2, 2}, r),
                                                    rn({2, 2, 1}, r)};
                     },
                     [](Graph& g, const std::vector<Var>& v) {
                         return g.concat_last({v[0], v[1], v[2]});
                     }});
    cases.push_back({"slice_last",
                     [rn](Rng& r) { return std::vector<Tensor>{rn({2, 3, 6}, r)}; },
                     [](Graph& g, const std::vector<Var>& v) { return g.slice_last(v[0], 1, 4); }});
    cases.push_back(
        {"slice_channels",
         [rn](Rng& r) { return std::vector<Tensor>{rn({2, 5, 4}, r)}; },
         [](Graph& g, const std::vector<Var>& v) { return g.slice_channels(v[0], 1, 3); }});
    cases.push_back({"transpose_12",
                     [rn](Rng& r) { return std::vector<Tensor>{rn({2, 3, 4}, r)}; },
                     [](Graph& g, const std::vector<Var>& v) { return g.transpose_12(v[0]); }});
    cases.push_back({"sum",
                     [rn](Rng& r) { return std::vector<Tensor>{rn({3, 3}, r)}; },
                     [](Graph& g, const std::vector<Var>& v) { return g.sum(v[0]); }});
    cases.push_back({"mean",
                     [rn](Rng& r) { return std::vector<Tensor>{rn({3, 3}, r)}; },
                     [](Graph& g, const std::vector<Var>& v) { return g.mean(v[0]); }});
    cases.push_back(
        {"add_bias",
         [rn](Rng& r) { return std::vector<Tensor>{rn({2, 3, 4}, r), rn({4}, r)}; },
         [](Graph& g, const std::vector<Var>& v) { return g.add_bias(v[0], v[1]); }});
    cases.push_back(
        {"add_rowvec",
         [rn](Rng& r) { return std::vector<Tensor>{rn({2, 3, 4}, r), rn({2, 4}, r)}; },
         [](Graph& g, const std::vector<Var>& v) { return g.add_rowvec(v[0], v[1]); }});
    cases.push_back({"linear",
                     [rn](Rng& r) {
                         return std::vector<Tensor>{rn({2, 3, 4}, r), rn({4, 5}, r), rn({5}, r)};
                     },
                     [](Graph& g, const std::vector<Var>& v) {
                         return g.linear(v[0], v[1], v[2]);
                     }});
    cases.push_back({"conv1d",
                     [rn](Rng& r) {
                         return std::vector<Tensor>{rn({2, 3, 9}, r), rn({4, 3, 3}, r), rn({4}, r)};
                     },
                     [](Graph& g, const std::vector<Var>& v) {
                         return g.conv1d(v[0], v[1], v[2], 2, 1);
                     }});
    cases.push_back({"conv_transpose1d",
                     [rn](Rng& r) {
                         return std::vector<Tensor>{rn({2, 3, 5}, r), rn({3, 4, 4}, r), rn({4}, r)};
                     },
                     [](Graph& g, const std::vector<Var>& v) {
                         return g.conv_transpose1d(v[0], v[1], v[2], 2, 1);
                     }});
    cases.push_back(
        {"rms_norm",
         [rn](Rng& r) { return std::vector<Tensor>{rn({2, 3, 4}, r), rn({4}, r)}; },
         [](Graph& g, const std::vector<Var>& v) { return g.rms_norm(v[0], v[1]); }});
    cases.push_back({"rope",
                     [rn](Rng& r) { return std::vector<Tensor>{rn({1, 5, 8}, r)}; },
                     [](Graph& g, const std::vector<Var>& v) { return g.rope(v[0], 2); }});
    cases.push_back({"attention",
                     [rn](Rng& r) {
                         return std::vector<Tensor>{rn({2, 3, 8}, r), rn({2, 4, 8}, r),
                                                    rn({2, 4, 8}, r)};
                     },
                     [](Graph& g, const std::vector<Var>& v) {
                         return g.attention(v[0], v[1], v[2], 2);
                     }});
    cases.push_back({"select_row",
                     [rn](Rng& r) { return std::vector<Tensor>{rn({4, 6}, r)}; },
                     [](Graph& g, const std::vector<Var>& v) { return g.select_row(v[0], 2); }});
    cases.push_back(
        {"sinusoid_embed",
         [](Rng& r) {
             Tensor t({2});
             t.data = {r.uniform(0.1, 0.9), r.uniform(0.1, 0.9)};
             t.requires_grad = true;
             return std::vector<Tensor>{t};
         },
         [](Graph& g, const std::vector<Var>& v) { return g.sinusoid_embed(v[0], 8); }});
    return cases;
}

double eval_loss(const OpCase& c, const std::vector<Tensor>& inputs, const Tensor& proj) {
    Graph g;
    std::vector<Var> vars;
    for (const Tensor& t : inputs) vars.push_back(g.leaf(t));
    Var out = c.build(g, vars);
    Var loss = project(g, out, proj);
    return loss.value().item();
}

} // namespace

// ---------------------------------------------------------------------------
// global properties over every registered op
// ---------------------------------------------------------------------------

TEST_CASE("reverse-mode gradients match central finite differences for every op") {
    const double h = 1e-5;
    for (const OpCase& c : op_cases()) {
        CAPTURE(c.name);
        for (uint64_t seed = 0; seed < 20; ++seed) {
            Rng rng(Rng::derive(42, seed));
            std::vector<Tensor> inputs = c.inputs(rng);

            Graph g;
            std::vector<Var> vars;
            for (const Tensor& t : inputs) vars.push_back(g.leaf(t));
            Var out = c.build(g, vars);
            Tensor proj = Tensor::randn(out.value().shape, rng);
            Var loss = project(g, out, proj);
            g.backward(loss);

            for (size_t vi = 0; vi < inputs.size(); ++vi) {
                if (!inputs[vi].requires_grad) continue;
                Tensor grad = g.grad(vars[vi]);
                int64_t n = inputs[vi].numel();
                // probe a handful of coordinates per input
                int64_t step = std::max<int64_t>(1, n / 4);
                for (int64_t i = seed % 2; i < n; i += step) {
                    std::vector<Tensor> plus = inputs, minus = inputs;
                    plus[vi].data[static_cast<size_t>(i)] += h;
                    minus[vi].data[static_cast<size_t>(i)] -= h;
                    double fd =
                        (eval_loss(c, plus, proj) - eval_loss(c, minus, proj)) / (2.0 * h);
                    double ad = grad.data[static_cast<size_t>(i)];
                    CAPTURE(vi);
                    CAPTURE(i);
                    CHECK(rel_err(fd, ad) <= 1e-4);
                }
            }
        }
    }
}

TEST_CASE("forward-mode tangent equals gradient-direction inner product for every op") {
    for (const OpCase& c : op_cases()) {
        CAPTURE(c.name);
        for (uint64_t seed = 0; seed < 5; ++seed) {
            Rng rng(Rng::derive(99, seed));
            std::vector<Tensor> inputs = c.inputs(rng);

            Graph g;
            std::vector<Var> vars;
            for (const Tensor& t : inputs) vars.push_back(g.leaf(t));
            Var out = c.build(g, vars);
            Tensor proj = Tensor::randn(out.value().shape, rng);
            Var loss = project(g, out, proj);
            g.backward(loss);

            std::vector<Tensor> dirs;
            double inner = 0.0;
            for (size_t vi = 0; vi < inputs.size(); ++vi) {
                Tensor dir = Tensor::randn(inputs[vi].shape, rng);
                Tensor grad = g.grad(vars[vi]);
                for (int64_t i = 0; i < dir.numel(); ++i)
                    inner += grad.data[static_cast<size_t>(i)] * dir.data[static_cast<size_t>(i)];
                dirs.push_back(std::move(dir));
            }
            for (size_t vi = 0; vi < inputs.size(); ++vi) g.seed_tangent(vars[vi], dirs[vi]);
            g.run_tangent();
            double tan = g.tangent(loss).item();
            CHECK(rel_err(tan, inner) <= 1e-10);
        }
    }
}

TEST_CASE("backward replay is bitwise deterministic") {
    Rng rng(7);
    Tensor x = Tensor::randn({2, 3, 8}, rng);
    x.requires_grad = true;
    Tensor w = Tensor::randn({8, 8}, rng);
    w.requires_grad = true;
    Graph g;
    Var vx = g.leaf(x);
    Var vw = g.leaf(w);
    Var y = g.attention(g.linear(vx, vw), vx, vx, 2);
    Var loss = g.mean(g.mul(y, y));
    g.backward(loss);
    Tensor g1x = g.grad(vx), g1w = g.grad(vw);
    g.backward(loss);
    Tensor g2x = g.grad(vx), g2w = g.grad(vw);
    CHECK(g1x.data == g2x.data);
    CHECK(g1w.data == g2w.data);
}

// ---------------------------------------------------------------------------
// conv1d
// ---------------------------------------------------------------------------

namespace {

Tensor conv1d_oracle(const Tensor& x, const Tensor& w, int64_t stride, int64_t pad) {
    int64_t B = x.dim(0), Cin = x.dim(1), L = x.dim(2);
    int64_t Cout = w.dim(0), K = w.dim(2);
    int64_t Lout = (L + 2 * pad - K) / stride + 1;
    Tensor y({B, Cout, Lout});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t co = 0; co < Cout; ++co)
            for (int64_t ol = 0; ol < Lout; ++ol) {
                double acc = 0.0;
                for (int64_t ci = 0; ci < Cin; ++ci)
                    for (int64_t k = 0; k < K; ++k) {
                        int64_t il = ol * stride + k - pad;
                        if (il < 0 || il >= L) continue;
                        acc += x.data[static_cast<size_t>((b * Cin + ci) * L + il)] *
                               w.data[static_cast<size_t>((co * Cin + ci) * K + k)];
                    }
                y.data[static_cast<size_t>((b * Cout + co) * Lout + ol)] = acc;
            }
    return y;
}

} // namespace

TEST_CASE("conv1d identity kernel passes input through") {
    Graph g;
    Var x = g.constant(Tensor::from({1, 1, 4}, {1, 2, 3, 4}));
    Var w = g.constant(Tensor::from({1, 1, 1}, {1}));
    Var y = g.conv1d(x, w, std::nullopt, 1, 0);
    CHECK(y.value().data == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("conv1d output length follows the floor formula") {
    Graph g;
    Rng rng(3);
    Var x = g.constant(Tensor::randn({1, 1, 5}, rng));
    Var w = g.constant(Tensor::randn({1, 1, 3}, rng));
    Var y = g.conv1d(x, w, std::nullopt, 2, 0);
    CHECK(y.value().dim(2) == 2);
}

TEST_CASE("conv1d matches the direct nested-loop oracle") {
    Rng rng(11);
    Tensor x = Tensor::randn({2, 3, 17}, rng);
    Tensor w = Tensor::randn({4, 3, 5}, rng);
    for (int64_t pad : {0, 2}) {
        Graph g;
        Var y = g.conv1d(g.constant(x), g.constant(w), std::nullopt, 3, pad);
        Tensor ref = conv1d_oracle(x, w, 3, pad);
        REQUIRE(y.value().shape == ref.shape);
        for (int64_t i = 0; i < ref.numel(); ++i)
            CHECK(std::abs(y.value().data[static_cast<size_t>(i)] -
                           ref.data[static_cast<size_t>(i)]) <= 1e-12);
    }
}

TEST_CASE("conv1d rejects channel mismatch with a shape error") {
    Graph g;
    Rng rng(5);
    Var x = g.constant(Tensor::randn({1, 2, 8}, rng));
    Var w = g.constant(Tensor::randn({1, 3, 3}, rng));
    CHECK_THROWS_AS(g.conv1d(x, w, std::nullopt, 1, 0), Error);
    try {
        g.conv1d(x, w, std::nullopt, 1, 0);
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::shape);
    }
}

TEST_CASE("conv_transpose1d inverts the length arithmetic") {
    Graph g;
    Rng rng(6);
    Var x = g.constant(Tensor::randn({1, 2, 10}, rng));
    Var w = g.constant(Tensor::randn({2, 3, 6}, rng));
    Var y = g.conv_transpose1d(x, w, std::nullopt, 2, 2);
    CHECK(y.value().dim(2) == (10 - 1) * 2 + 6 - 4); // 20
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

namespace {

Tensor attention_oracle(const Tensor& q, const Tensor& k, const Tensor& v, int64_t heads) {
    int64_t B = q.dim(0), L = q.dim(1), D = q.dim(2), M = k.dim(1);
    int64_t hd = D / heads;
    Tensor out({B, L, D});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t l = 0; l < L; ++l) {
                std::vector<double> s(static_cast<size_t>(M));
                for (int64_t m = 0; m < M; ++m) {
                    double acc = 0.0;
                    for (int64_t d = 0; d < hd; ++d)
                        acc += q.data[static_cast<size_t>((b * L + l) * D + h * hd + d)] *
                               k.data[static_cast<size_t>((b * M + m) * D + h * hd + d)];
                    s[static_cast<size_t>(m)] = acc / std::sqrt(static_cast<double>(hd));
                }
                double denom = 0.0;
                for (double& e : s) denom += (e = std::exp(e));
                for (double& e : s) e /= denom;
                for (int64_t m = 0; m < M; ++m)
                    for (int64_t d = 0; d < hd; ++d)
                        out.data[static_cast<size_t>((b * L + l) * D + h * hd + d)] +=
                            s[static_cast<size_t>(m)] *
                            v.data[static_cast<size_t>((b * M + m) * D + h * hd + d)];
            }
    return out;
}

} // namespace

TEST_CASE("attention with one key broadcasts the value everywhere") {
    Rng rng(21);
    Graph g;
    Tensor q = Tensor::randn({1, 4, 6}, rng);
    Tensor k = Tensor::randn({1, 1, 6}, rng);
    Tensor v = Tensor::randn({1, 1, 6}, rng);
    Var out = g.attention(g.constant(q), g.constant(k), g.constant(v), 3);
    for (int64_t l = 0; l < 4; ++l)
        for (int64_t d = 0; d < 6; ++d)
            CHECK(out.value().data[static_cast<size_t>(l * 6 + d)] ==
                  doctest::Approx(v.data[static_cast<size_t>(d)]).epsilon(1e-14));
}

TEST_CASE("attention of all zeros is zero") {
    Graph g;
    Tensor z({1, 2, 2});
    Var out = g.attention(g.constant(z), g.constant(z), g.constant(z), 1);
    for (double x : out.value().data) CHECK(x == 0.0);
}

TEST_CASE("attention matches the straight-line reference") {
    Rng rng(22);
    Tensor q = Tensor::randn({1, 3, 4}, rng);
    Tensor k = Tensor::randn({1, 3, 4}, rng);
    Tensor v = Tensor::randn({1, 3, 4}, rng);
    for (int64_t heads : {1, 2}) {
        Graph g;
        Var out = g.attention(g.constant(q), g.constant(k), g.constant(v), heads);
        Tensor ref = attention_oracle(q, k, v, heads);
        for (int64_t i = 0; i < ref.numel(); ++i)
            CHECK(std::abs(out.value().data[static_cast<size_t>(i)] -
                           ref.data[static_cast<size_t>(i)]) <= 1e-12);
    }
}

TEST_CASE("attention rejects a head count that does not divide the feature dim") {
    Graph g;
    Tensor q({1, 2, 6});
    CHECK_THROWS_AS(g.attention(g.constant(q), g.constant(q), g.constant(q), 4), Error);
}

// ---------------------------------------------------------------------------
// snake
// ---------------------------------------------------------------------------

TEST_CASE("snake fixed points and closed-form values") {
    Graph g;
    Tensor x({1, 1, 3});
    x.data = {0.0, M_PI / 2.0, 0.0};
    Tensor alpha = Tensor::from({1}, {1.0});
    Var y = g.snake(g.constant(x), g.constant(alpha));
    CHECK(y.value().data[0] == 0.0);
    CHECK(y.value().data[1] == doctest::Approx(M_PI / 2.0 + 1.0).epsilon(1e-12));

    // x = 0 stays 0 for any alpha
    Graph g2;
    Tensor alpha2 = Tensor::from({1}, {3.7});
    Var y2 = g2.snake(g2.constant(x), g2.constant(alpha2));
    CHECK(y2.value().data[0] == 0.0);
}

TEST_CASE("snake gradient matches central finite differences") {
    Rng rng(31);
    const double h = 1e-5;
    Tensor x = Tensor::randn({1, 2, 6}, rng);
    x.requires_grad = true;
    Tensor alpha = randn_pos({2}, rng);
    auto loss_at = [&](const Tensor& xt) {
        Graph g;
        Var y = g.snake(g.constant(xt), g.constant(alpha));
        return g.sum(y).value().item();
    };
    Graph g;
    Var vx = g.leaf(x);
    Var y = g.snake(vx, g.constant(alpha));
    g.backward(g.sum(y));
    Tensor grad = g.grad(vx);
    for (int64_t i = 0; i < x.numel(); ++i) {
        Tensor plus = x, minus = x;
        plus.data[static_cast<size_t>(i)] += h;
        minus.data[static_cast<size_t>(i)] -= h;
        double fd = (loss_at(plus) - loss_at(minus)) / (2 * h);
        CHECK(rel_err(fd, grad.data[static_cast<size_t>(i)]) <= 1e-6);
    }
}

TEST_CASE("snake rejects nonpositive alpha") {
    Graph g;
    Tensor x({1, 1, 2});
    CHECK_THROWS_AS(g.snake(g.constant(x), g.constant(Tensor::from({1}, {-1.0}))), Error);
}

// ---------------------------------------------------------------------------
// backward / jvp / stop_gradient contracts
// ---------------------------------------------------------------------------

TEST_CASE("backward of the identity is one") {
    Graph g;
    Tensor x = Tensor::scalar(2.5);
    x.requires_grad = true;
    Var vx = g.leaf(x);
    g.backward(g.sum(vx));
    CHECK(g.grad(vx).data[0] == 1.0);
}

TEST_CASE("backward of sum of squares") {
    Graph g;
    Tensor x = Tensor::from({3}, {1, 2, 3});
    x.requires_grad = true;
    Var vx = g.leaf(x);
    g.backward(g.sum(g.mul(vx, vx)));
    CHECK(g.grad(vx).data == std::vector<double>{2, 4, 6});
}

TEST_CASE("backward rejects a non-scalar loss") {
    Graph g;
    Tensor x({3});
    x.requires_grad = true;
    Var vx = g.leaf(x);
    CHECK_THROWS_AS(g.backward(vx), Error);
}

TEST_CASE("off-path leaves receive zero gradient") {
    Graph g;
    Tensor x = Tensor::from({2}, {1, 2});
    x.requires_grad = true;
    Tensor y = Tensor::from({2}, {3, 4});
    y.requires_grad = true;
    Var vx = g.leaf(x);
    Var vy = g.leaf(y);
    g.backward(g.sum(vx));
    CHECK(g.grad(vy).data == std::vector<double>{0, 0});
}

TEST_CASE("jvp of the identity returns the direction") {
    Tensor at = Tensor::from({3}, {1, 2, 3});
    Tensor dir = Tensor::from({3}, {0.5, -1, 2});
    auto [val, tan] = jvp([](Graph&, Var x) { return x; }, at, dir);
    CHECK(val.data == at.data);
    CHECK(tan.data == dir.data);
}

TEST_CASE("jvp of x*x doubles the direction elementwise") {
    Tensor at = Tensor::from({2}, {1, 2});
    Tensor dir = Tensor::from({2}, {1, 1});
    auto [val, tan] = jvp([](Graph& g, Var x) { return g.mul(x, x); }, at, dir);
    CHECK(val.data == std::vector<double>{1, 4});
    CHECK(tan.data == std::vector<double>{2, 4});
}

TEST_CASE("jvp through an op without a tangent rule raises unsupported") {
    Tensor at = Tensor::from({2}, {1, 2});
    auto f = [](Graph& g, Var x) {
        CustomRule rule;
        rule.backward = [](const Tensor&, const std::vector<double>&,
                           const std::vector<const Tensor*>&,
                           const std::vector<std::vector<double>*>&) {};
        return g.custom("no_tangent", {x}, Tensor::from({2}, {0, 0}), rule);
    };
    CHECK_THROWS_AS(jvp(f, at, at), Error);
}

TEST_CASE("stop_gradient passes values and blocks both derivative modes") {
    Tensor x = Tensor::from({1}, {3});
    x.requires_grad = true;

    Graph g;
    Var vx = g.leaf(x);
    Var sg = g.stop_gradient(vx);
    for (int64_t i = 0; i < x.numel(); ++i)
        CHECK(sg.value().data[static_cast<size_t>(i)] == x.data[static_cast<size_t>(i)]);

    // d/dx sum(sg(x) * x) = sg(x) = 3, not 6
    Var loss = g.sum(g.mul(sg, vx));
    g.backward(loss);
    CHECK(g.grad(vx).data == std::vector<double>{3});

    // tangent blocked as well
    g.seed_tangent(vx, Tensor::from({1}, {1}));
    g.run_tangent();
    CHECK(g.tangent(sg).data == std::vector<double>{0});
}

TEST_CASE("rope preserves per-position norms and relative phase") {
    Rng rng(77);
    const int64_t L = 6, D = 8;
    Tensor x = Tensor::randn({1, L, D}, rng);
    Graph g;
    Var rot = g.rope(g.constant(x), 2);
    // norm preservation per position
    for (int64_t l = 0; l < L; ++l) {
        double n0 = 0.0, n1 = 0.0;
        for (int64_t d = 0; d < D; ++d) {
            double a = x.data[static_cast<size_t>(l * D + d)];
            double b = rot.value().data[static_cast<size_t>(l * D + d)];
            n0 += a * a;
            n1 += b * b;
        }
        CHECK(rel_err(n0, n1) <= 1e-12);
    }
    // position 0 is the identity rotation
    for (int64_t d = 0; d < D; ++d)
        CHECK(rot.value().data[static_cast<size_t>(d)] ==
              doctest::Approx(x.data[static_cast<size_t>(d)]).epsilon(1e-15));

    // fixed content replicated at all positions: score depends only on offset
    Tensor qc = Tensor::randn({1, 1, D}, rng);
    Tensor kc = Tensor::randn({1, 1, D}, rng);
    Tensor qrep({1, L, D}), krep({1, L, D});
    for (int64_t l = 0; l < L; ++l)
        for (int64_t d = 0; d < D; ++d) {
            qrep.data[static_cast<size_t>(l * D + d)] = qc.data[static_cast<size_t>(d)];
            krep.data[static_cast<size_t>(l * D + d)] = kc.data[static_cast<size_t>(d)];
        }
    Graph g2;
    Var qr = g2.rope(g2.constant(qrep), 2);
    Var kr = g2.rope(g2.constant(krep), 2);
    auto dot = [&](int64_t m, int64_t n) {
        double acc = 0.0;
        for (int64_t d = 0; d < D; ++d)
            acc += qr.value().data[static_cast<size_t>(m * D + d)] *
                   kr.value().data[static_cast<size_t>(n * D + d)];
        return acc;
    };
    for (int64_t off = 0; off < 3; ++off)
        for (int64_t m = 0; m + off < L; ++m)
            CHECK(rel_err(dot(m + off, m), dot(off, 0)) <= 1e-9);
}

TEST_CASE("rope rejects odd head dimensions") {
    Graph g;
    Tensor x({1, 2, 6});
    CHECK_THROWS_AS(g.rope(g.constant(x), 2), Error); // head dim 3
}
