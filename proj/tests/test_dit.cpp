#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "latgen/dit.hpp"
#include "latgen/rng.hpp"

using namespace latgen;
using namespace latgen::dit;

namespace {

DiTConfig small_config() {
    DiTConfig cfg;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.hidden = 16;
    cfg.latent_dim = 4;
    cfg.concat_extra_dim = 4;
    cfg.cross_dim = 6;
    cfg.time_embed_dim = 8;
    cfg.dropout = 0.0;
    return cfg;
}

ConditionPayload payload_for(const DiTConfig& cfg, int64_t B, int64_t frames, Rng& rng,
                             bool with_cross) {
    ConditionPayload p;
    p.concat = Tensor::randn({B, frames, cfg.concat_extra_dim}, rng);
    if (with_cross && cfg.cross_dim > 0) p.cross = Tensor::randn({B, 2, cfg.cross_dim}, rng);
    p.task_index = 1;
    return p;
}

} // namespace

// ---------------------------------------------------------------------------
// parameter arithmetic
// ---------------------------------------------------------------------------

TEST_CASE("analytic parameter count matches the allocated parameters") {
    for (uint64_t seed : {1ull, 2ull}) {
        DiTConfig cfg = seed == 1 ? small_config() : DiTConfig::toy();
        DiT model(cfg, seed);
        CHECK(model.params().total_elements() == cfg.param_count());
    }
    // variant without cross / without task embedding / with interval scalar
    DiTConfig cfg = small_config();
    cfg.cross_dim = 0;
    cfg.task_embedding = false;
    cfg.interval_embedding = true;
    DiT model(cfg, 3);
    CHECK(model.params().total_elements() == cfg.param_count());
}

TEST_CASE("full preset parameter count is within 10 percent of 1.7e9") {
    DiTConfig cfg = DiTConfig::full();
    double count = static_cast<double>(cfg.param_count());
    CHECK(std::abs(count - 1.7e9) / 1.7e9 <= 0.10);
    CHECK(cfg.layers == 32);
    CHECK(cfg.heads == 24);
    CHECK(cfg.hidden == 1536);
}

// ---------------------------------------------------------------------------
// condition embedding
// ---------------------------------------------------------------------------

TEST_CASE("distinct task ids produce distinct global vectors") {
    DiTConfig cfg = small_config();
    DiT model(cfg, 5);
    Rng rng(6);
    ConditionPayload pl = payload_for(cfg, 1, 3, rng, false);

    Graph g;
    BoundParams p = bind_params(g, model.params(), false);
    Var t = g.constant(Tensor::from({1}, {0.3}));
    Var g0 = model.embed_conditions(g, p, 0, t, std::nullopt, pl).global;
    Var g1 = model.embed_conditions(g, p, 1, t, std::nullopt, pl).global;
    double dist = 0.0;
    for (size_t i = 0; i < g0.value().data.size(); ++i)
        dist += std::abs(g0.value().data[i] - g1.value().data[i]);
    CHECK(dist > 1e-3);
}

TEST_CASE("global vector is task embedding plus projected sinusoids") {
    DiTConfig cfg = small_config();
    cfg.interval_embedding = true;
    DiT model(cfg, 7);
    const double t = 0.37;

    Graph g;
    BoundParams p = bind_params(g, model.params(), false);
    Var tv = g.constant(Tensor::from({1}, {t}));
    Var rv = g.constant(Tensor::from({1}, {t}));
    ConditionPayload pl;
    pl.task_index = 2;
    Tensor global = model.embed_conditions(g, p, 2, tv, rv, pl).global.value();

    // independent recomputation of sinusoid + two projections + task row
    const ParamStore& ps = model.params();
    int64_t dim = cfg.time_embed_dim, half = dim / 2, h = cfg.hidden;
    std::vector<double> sinus(static_cast<size_t>(dim));
    for (int64_t i = 0; i < half; ++i) {
        double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
        sinus[static_cast<size_t>(i)] = std::sin(100.0 * t * freq);
        sinus[static_cast<size_t>(half + i)] = std::cos(100.0 * t * freq);
    }
    for (int64_t o = 0; o < h; ++o) {
        double acc = ps.at("t_proj.b").data[static_cast<size_t>(o)] +
                     ps.at("r_proj.b").data[static_cast<size_t>(o)] +
                     ps.at("task_emb").data[static_cast<size_t>(2 * h + o)];
        for (int64_t i = 0; i < dim; ++i) {
            acc += sinus[static_cast<size_t>(i)] *
                   (ps.at("t_proj.w").data[static_cast<size_t>(i * h + o)] +
                    ps.at("r_proj.w").data[static_cast<size_t>(i * h + o)]);
        }
        CHECK(global.data[static_cast<size_t>(o)] == doctest::Approx(acc).epsilon(1e-12));
    }
}

TEST_CASE("embed_conditions rejects unknown task ids") {
    DiTConfig cfg = small_config();
    DiT model(cfg, 8);
    Graph g;
    BoundParams p = bind_params(g, model.params(), false);
    Var t = g.constant(Tensor::from({1}, {0.1}));
    ConditionPayload pl;
    CHECK_THROWS_AS(model.embed_conditions(g, p, 99, t, std::nullopt, pl), Error);
}

// ---------------------------------------------------------------------------
// forward pass
// ---------------------------------------------------------------------------

TEST_CASE("eval forward is deterministic and keeps the latent shape") {
    DiTConfig cfg = small_config();
    DiT model(cfg, 9);
    Rng rng(10);
    for (bool with_cross : {false, true}) {
        ConditionPayload pl = payload_for(cfg, 1, 5, rng, with_cross);
        Tensor z = Tensor::randn({1, 5, cfg.latent_dim}, rng);
        Tensor a = model.forward_eval(z, 1, 0.4, std::nullopt, pl);
        Tensor b = model.forward_eval(z, 1, 0.4, std::nullopt, pl);
        CHECK(a.shape == z.shape);
        CHECK(a.data == b.data);
    }
}

TEST_CASE("without a cross payload the cross parameters are never touched") {
    DiTConfig cfg = small_config();
    DiT model(cfg, 11);
    Rng rng(12);
    ConditionPayload pl = payload_for(cfg, 1, 4, rng, false);
    Tensor z = Tensor::randn({1, 4, cfg.latent_dim}, rng);
    Tensor before = model.forward_eval(z, 0, 0.2, std::nullopt, pl);
    for (auto& [name, t] : model.params().params)
        if (name.find(".cross.") != std::string::npos || name.find("ln2") != std::string::npos ||
            name.find("bias_cross") != std::string::npos)
            for (double& v : t.data) v = 1e6;
    Tensor after = model.forward_eval(z, 0, 0.2, std::nullopt, pl);
    CHECK(before.data == after.data);
}

TEST_CASE("frame-count mismatch between z_t and the concat payload is an error") {
    DiTConfig cfg = small_config();
    DiT model(cfg, 13);
    Rng rng(14);
    ConditionPayload pl = payload_for(cfg, 1, 6, rng, false);
    Tensor z = Tensor::randn({1, 4, cfg.latent_dim}, rng);
    CHECK_THROWS_AS(model.forward_eval(z, 0, 0.2, std::nullopt, pl), Error);
}

TEST_CASE("dropout is active only in training mode") {
    DiTConfig cfg = small_config();
    cfg.dropout = 0.5;
    DiT model(cfg, 15);
    Rng rng(16);
    ConditionPayload pl = payload_for(cfg, 1, 4, rng, false);
    Tensor z = Tensor::randn({1, 4, cfg.latent_dim}, rng);

    Tensor ev = model.forward_eval(z, 0, 0.3, std::nullopt, pl);

    Graph g;
    BoundParams p = bind_params(g, model.params(), false);
    Var t = g.constant(Tensor::from({1}, {0.3}));
    ConditionBundle bundle = model.embed_conditions(g, p, 0, t, std::nullopt, pl);
    Rng drop(17);
    Var out = model.forward(g, p, g.constant(z), bundle, true, &drop);
    double diff = 0.0;
    for (size_t i = 0; i < ev.data.size(); ++i)
        diff += std::abs(ev.data[i] - out.value().data[i]);
    CHECK(diff > 1e-9);
}

TEST_CASE("perturbing the task embedding changes the output") {
    DiTConfig cfg = small_config();
    DiT model(cfg, 18);
    Rng rng(19);
    ConditionPayload pl = payload_for(cfg, 1, 4, rng, true);
    pl.task_index = 0;
    Tensor z = Tensor::randn({1, 4, cfg.latent_dim}, rng);
    Tensor before = model.forward_eval(z, 0, 0.5, std::nullopt, pl);
    for (int64_t d = 0; d < cfg.hidden; ++d) model.params().at("task_emb").data[static_cast<size_t>(d)] += 0.1;
    Tensor after = model.forward_eval(z, 0, 0.5, std::nullopt, pl);
    double diff = 0.0;
    for (size_t i = 0; i < before.data.size(); ++i) diff += std::abs(before.data[i] - after.data[i]);
    CHECK(diff > 1e-6);
}

// ---------------------------------------------------------------------------
// straight-line single-layer reference
// ---------------------------------------------------------------------------

namespace {

std::vector<double> matvec_rows(const std::vector<double>& x, int64_t rows, int64_t in,
                                const Tensor& w, const Tensor& b) {
    int64_t out = w.dim(1);
    std::vector<double> y(static_cast<size_t>(rows * out), 0.0);
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t o = 0; o < out; ++o) {
            double acc = b.data[static_cast<size_t>(o)];
            for (int64_t i = 0; i < in; ++i)
                acc += x[static_cast<size_t>(r * in + i)] * w.data[static_cast<size_t>(i * out + o)];
            y[static_cast<size_t>(r * out + o)] = acc;
        }
    return y;
}

void ref_rms(std::vector<double>& x, int64_t rows, int64_t d, const Tensor& gain) {
    for (int64_t r = 0; r < rows; ++r) {
        double ss = 0.0;
        for (int64_t i = 0; i < d; ++i) ss += x[static_cast<size_t>(r * d + i)] * x[static_cast<size_t>(r * d + i)];
        double inv = 1.0 / std::sqrt(ss / static_cast<double>(d) + 1e-8);
        for (int64_t i = 0; i < d; ++i)
            x[static_cast<size_t>(r * d + i)] *= inv * gain.data[static_cast<size_t>(i)];
    }
}

void ref_rope(std::vector<double>& x, int64_t rows, int64_t d) {
    // single head, pairs (2i, 2i+1)
    int64_t half = d / 2;
    for (int64_t l = 0; l < rows; ++l)
        for (int64_t i = 0; i < half; ++i) {
            double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(d));
            double ang = static_cast<double>(l) * freq;
            double c = std::cos(ang), s = std::sin(ang);
            double a = x[static_cast<size_t>(l * d + 2 * i)];
            double b = x[static_cast<size_t>(l * d + 2 * i + 1)];
            x[static_cast<size_t>(l * d + 2 * i)] = a * c - b * s;
            x[static_cast<size_t>(l * d + 2 * i + 1)] = a * s + b * c;
        }
}

std::vector<double> ref_attention(const std::vector<double>& q, const std::vector<double>& k,
                                  const std::vector<double>& v, int64_t L, int64_t M, int64_t d) {
    std::vector<double> out(static_cast<size_t>(L * d), 0.0);
    for (int64_t l = 0; l < L; ++l) {
        std::vector<double> s(static_cast<size_t>(M));
        double mx = -1e300;
        for (int64_t m = 0; m < M; ++m) {
            double acc = 0.0;
            for (int64_t i = 0; i < d; ++i)
                acc += q[static_cast<size_t>(l * d + i)] * k[static_cast<size_t>(m * d + i)];
            s[static_cast<size_t>(m)] = acc / std::sqrt(static_cast<double>(d));
            mx = std::max(mx, s[static_cast<size_t>(m)]);
        }
        double denom = 0.0;
        for (double& e : s) denom += (e = std::exp(e - mx));
        for (int64_t m = 0; m < M; ++m)
            for (int64_t i = 0; i < d; ++i)
                out[static_cast<size_t>(l * d + i)] +=
                    s[static_cast<size_t>(m)] / denom * v[static_cast<size_t>(m * d + i)];
    }
    return out;
}

} // namespace

TEST_CASE("single-layer single-head forward matches a straight-line reference") {
    DiTConfig cfg;
    cfg.layers = 1;
    cfg.heads = 1;
    cfg.hidden = 4;
    cfg.latent_dim = 2;
    cfg.concat_extra_dim = 2;
    cfg.cross_dim = 3;
    cfg.time_embed_dim = 4;
    cfg.mlp_ratio = 2.0;
    cfg.dropout = 0.0;
    DiT model(cfg, 20);
    Rng rng(21);
    const int64_t L = 2, M = 2, h = 4;
    ConditionPayload pl;
    pl.concat = Tensor::randn({1, L, 2}, rng);
    pl.cross = Tensor::randn({1, M, 3}, rng);
    pl.task_index = 1;
    Tensor z = Tensor::randn({1, L, 2}, rng);
    const double t = 0.62;
    Tensor got = model.forward_eval(z, 1, t, std::nullopt, pl);

    const ParamStore& ps = model.params();
    // global vector
    std::vector<double> sinus(4);
    for (int64_t i = 0; i < 2; ++i) {
        double freq = std::pow(10000.0, -static_cast<double>(i) / 2.0);
        sinus[static_cast<size_t>(i)] = std::sin(100.0 * t * freq);
        sinus[static_cast<size_t>(2 + i)] = std::cos(100.0 * t * freq);
    }
    std::vector<double> global = matvec_rows(sinus, 1, 4, ps.at("t_proj.w"), ps.at("t_proj.b"));
    for (int64_t i = 0; i < h; ++i)
        global[static_cast<size_t>(i)] += ps.at("task_emb").data[static_cast<size_t>(h + i)];

    // input projection of [z ; concat]
    std::vector<double> xin(static_cast<size_t>(L * 4));
    for (int64_t l = 0; l < L; ++l) {
        xin[static_cast<size_t>(l * 4 + 0)] = z.data[static_cast<size_t>(l * 2 + 0)];
        xin[static_cast<size_t>(l * 4 + 1)] = z.data[static_cast<size_t>(l * 2 + 1)];
        xin[static_cast<size_t>(l * 4 + 2)] = pl.concat->data[static_cast<size_t>(l * 2 + 0)];
        xin[static_cast<size_t>(l * 4 + 3)] = pl.concat->data[static_cast<size_t>(l * 2 + 1)];
    }
    std::vector<double> x = matvec_rows(xin, L, 4, ps.at("in_proj.w"), ps.at("in_proj.b"));

    auto biased_norm = [&](const std::vector<double>& xi, const char* ln, const char* bw,
                           const char* bb) {
        std::vector<double> u = xi;
        ref_rms(u, L, h, ps.at(ln));
        std::vector<double> bias = matvec_rows(global, 1, h, ps.at(bw), ps.at(bb));
        for (int64_t l = 0; l < L; ++l)
            for (int64_t i = 0; i < h; ++i) u[static_cast<size_t>(l * h + i)] += bias[static_cast<size_t>(i)];
        return u;
    };

    // self-attention
    {
        std::vector<double> u = biased_norm(x, "layer00.ln1.g", "layer00.bias_self.w",
                                            "layer00.bias_self.b");
        auto q = matvec_rows(u, L, h, ps.at("layer00.self.wq"), ps.at("layer00.self.bq"));
        auto k = matvec_rows(u, L, h, ps.at("layer00.self.wk"), ps.at("layer00.self.bk"));
        auto v = matvec_rows(u, L, h, ps.at("layer00.self.wv"), ps.at("layer00.self.bv"));
        ref_rope(q, L, h);
        ref_rope(k, L, h);
        auto a = ref_attention(q, k, v, L, L, h);
        a = matvec_rows(a, L, h, ps.at("layer00.self.wo"), ps.at("layer00.self.bo"));
        for (size_t i = 0; i < x.size(); ++i) x[i] += a[i];
    }
    // cross-attention
    {
        std::vector<double> u = biased_norm(x, "layer00.ln2.g", "layer00.bias_cross.w",
                                            "layer00.bias_cross.b");
        auto q = matvec_rows(u, L, h, ps.at("layer00.cross.wq"), ps.at("layer00.cross.bq"));
        std::vector<double> cr(pl.cross->data);
        auto k = matvec_rows(cr, M, 3, ps.at("layer00.cross.wk"), ps.at("layer00.cross.bk"));
        auto v = matvec_rows(cr, M, 3, ps.at("layer00.cross.wv"), ps.at("layer00.cross.bv"));
        auto a = ref_attention(q, k, v, L, M, h);
        a = matvec_rows(a, L, h, ps.at("layer00.cross.wo"), ps.at("layer00.cross.bo"));
        for (size_t i = 0; i < x.size(); ++i) x[i] += a[i];
    }
    // gated MLP
    {
        std::vector<double> u = biased_norm(x, "layer00.ln3.g", "layer00.bias_mlp.w",
                                            "layer00.bias_mlp.b");
        auto g1 = matvec_rows(u, L, h, ps.at("layer00.mlp.w1"), ps.at("layer00.mlp.b1"));
        auto g3 = matvec_rows(u, L, h, ps.at("layer00.mlp.w3"), ps.at("layer00.mlp.b3"));
        for (size_t i = 0; i < g1.size(); ++i)
            g1[i] = g1[i] / (1.0 + std::exp(-g1[i])) * g3[i];
        auto m = matvec_rows(g1, L, 8, ps.at("layer00.mlp.w2"), ps.at("layer00.mlp.b2"));
        for (size_t i = 0; i < x.size(); ++i) x[i] += m[i];
    }
    ref_rms(x, L, h, ps.at("final.ln.g"));
    auto out = matvec_rows(x, L, h, ps.at("out_proj.w"), ps.at("out_proj.b"));

    REQUIRE(got.numel() == static_cast<int64_t>(out.size()));
    for (size_t i = 0; i < out.size(); ++i) CHECK(std::abs(got.data[i] - out[i]) <= 1e-10);
}

// ---------------------------------------------------------------------------
// derivatives through the full model
// ---------------------------------------------------------------------------

TEST_CASE("full-model gradients match finite differences on a sampled subset") {
    DiTConfig cfg = DiTConfig::toy();
    cfg.dropout = 0.0;
    DiT model(cfg, 22);
    Rng rng(23);
    const int64_t frames = 8;
    ConditionPayload pl = payload_for(cfg, 1, frames, rng, true);
    Tensor z = Tensor::randn({1, frames, cfg.latent_dim}, rng);
    Tensor proj = Tensor::randn({1, frames, cfg.latent_dim}, rng);
    const double t = 0.45;

    auto loss_with = [&](const ParamStore& ps) {
        Graph g;
        BoundParams p = bind_params(g, ps, false);
        Var tv = g.constant(Tensor::from({1}, {t}));
        ConditionBundle bundle = model.embed_conditions(g, p, pl.task_index, tv, std::nullopt, pl);
        Var out = model.forward(g, p, g.constant(z), bundle);
        return g.sum(g.mul(out, g.constant(proj))).value().item();
    };

    Graph g;
    BoundParams p = bind_params(g, model.params(), true);
    Var tv = g.constant(Tensor::from({1}, {t}));
    ConditionBundle bundle = model.embed_conditions(g, p, pl.task_index, tv, std::nullopt, pl);
    Var out = model.forward(g, p, g.constant(z), bundle);
    g.backward(g.sum(g.mul(out, g.constant(proj))));

    // 64 coordinates spread over all parameter tensors
    const double h = 1e-5;
    int checked = 0;
    size_t tensor_idx = 0;
    size_t n_tensors = model.params().params.size();
    size_t stride = std::max<size_t>(1, n_tensors / 64);
    for (const auto& [name, tensor] : model.params().params) {
        if (tensor_idx++ % stride != 0 || checked >= 64) continue;
        int64_t i = static_cast<int64_t>((tensor_idx * 131) % tensor.numel());
        Tensor grad = g.grad(p.at(name));
        ParamStore plus, minus;
        plus.params = model.params().params;
        minus.params = model.params().params;
        plus.params[name].data[static_cast<size_t>(i)] += h;
        minus.params[name].data[static_cast<size_t>(i)] -= h;
        double fd = (loss_with(plus) - loss_with(minus)) / (2 * h);
        double ad = grad.data[static_cast<size_t>(i)];
        CAPTURE(name);
        double denom = std::max({std::abs(fd), std::abs(ad), 1e-3});
        CHECK(std::abs(fd - ad) / denom <= 1e-4);
        ++checked;
    }
    CHECK(checked >= 30);
}

TEST_CASE("jvp through the full model agrees with central differences") {
    DiTConfig cfg = small_config();
    DiT model(cfg, 24);
    Rng rng(25);
    const int64_t frames = 4;
    ConditionPayload pl = payload_for(cfg, 1, frames, rng, true);
    Tensor z = Tensor::randn({1, frames, cfg.latent_dim}, rng);
    Tensor dz = Tensor::randn({1, frames, cfg.latent_dim}, rng);
    const double t = 0.52;

    Graph g;
    BoundParams p = bind_params(g, model.params(), false);
    Var zv = g.leaf(z);
    Var tv = g.leaf(Tensor::from({1}, {t}));
    ConditionBundle bundle = model.embed_conditions(g, p, pl.task_index, tv, std::nullopt, pl);
    Var out = model.forward(g, p, zv, bundle);
    g.seed_tangent(zv, dz);
    g.seed_tangent(tv, Tensor::from({1}, {1.0}));
    g.run_tangent();
    Tensor tan = g.tangent(out);

    const double h = 1e-4;
    Tensor zp = z, zm = z;
    for (int64_t i = 0; i < z.numel(); ++i) {
        zp.data[static_cast<size_t>(i)] += h * dz.data[static_cast<size_t>(i)];
        zm.data[static_cast<size_t>(i)] -= h * dz.data[static_cast<size_t>(i)];
    }
    Tensor fp = model.forward_eval(zp, pl.task_index, t + h, std::nullopt, pl);
    Tensor fm = model.forward_eval(zm, pl.task_index, t - h, std::nullopt, pl);
    for (int64_t i = 0; i < tan.numel(); ++i) {
        double fd = (fp.data[static_cast<size_t>(i)] - fm.data[static_cast<size_t>(i)]) / (2 * h);
        double ad = tan.data[static_cast<size_t>(i)];
        double denom = std::max({std::abs(fd), std::abs(ad), 1e-4});
        CHECK(std::abs(fd - ad) / denom <= 1e-3);
    }
}
