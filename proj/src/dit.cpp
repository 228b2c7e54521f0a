#include "latgen/dit.hpp"

#include <cmath>
#include <cstdio>

namespace latgen::dit {

namespace {

void check(bool ok, ErrorKind kind, const std::string& msg) {
    if (!ok) throw Error(kind, msg);
}

Tensor init_linear(int64_t in, int64_t out, Rng& rng) {
    return Tensor::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
}

std::string layer_name(int64_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "layer%02d", static_cast<int>(i));
    return buf;
}

} // namespace

DiTConfig DiTConfig::toy() { return DiTConfig{}; }

DiTConfig DiTConfig::full() {
    DiTConfig cfg;
    cfg.layers = 32;
    cfg.heads = 24;
    cfg.hidden = 1536;
    cfg.latent_dim = 256;
    cfg.concat_extra_dim = 512;
    cfg.cross_dim = 768;
    cfg.time_embed_dim = 256;
    return cfg;
}

void DiTConfig::validate() const {
    check(layers >= 1 && heads >= 1 && hidden >= 1, ErrorKind::config, "dit: bad size config");
    check(hidden % heads == 0, ErrorKind::config,
          "dit: hidden " + std::to_string(hidden) + " must divide by " + std::to_string(heads) +
              " heads");
    check((hidden / heads) % 2 == 0, ErrorKind::config, "dit: head dim must be even for rotary");
    check(dropout >= 0.0 && dropout < 1.0, ErrorKind::config, "dit: dropout must be in [0,1)");
    check(latent_dim >= 1 && concat_extra_dim >= 0 && cross_dim >= 0, ErrorKind::config,
          "dit: bad width config");
    check(time_embed_dim >= 2 && time_embed_dim % 2 == 0, ErrorKind::config,
          "dit: time embedding dim must be even");
    check(n_tasks >= 1, ErrorKind::config, "dit: need at least one task");
}

int64_t DiTConfig::param_count() const {
    const int64_t h = hidden, c = cross_dim, mh = mlp_hidden();
    int64_t per_layer = 0;
    per_layer += h;               // ln1 gain
    per_layer += h * h + h;       // self global-bias projection
    per_layer += 4 * (h * h + h); // q,k,v,o
    if (c > 0) {
        per_layer += h;           // ln2 gain
        per_layer += h * h + h;   // cross global-bias projection
        per_layer += (h * h + h) * 2 + (c * h + h) * 2; // q,o from hidden; k,v from cross
    }
    per_layer += h;               // ln3 gain
    per_layer += h * h + h;       // mlp global-bias projection
    per_layer += 2 * (h * mh + mh) + mh * h + h; // gated in pair + out

    int64_t total = per_layer * layers;
    total += (latent_dim + concat_extra_dim) * h + h; // input projection
    total += h;                                       // final norm gain
    total += h * latent_dim + latent_dim;             // output projection
    if (task_embedding) total += n_tasks * h;
    total += time_embed_dim * h + h; // t projection
    if (interval_embedding) total += time_embed_dim * h + h;
    return total;
}

DiT::DiT(DiTConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(Rng::derive(seed, 0xd17));
    const int64_t h = cfg_.hidden, c = cfg_.cross_dim, mh = cfg_.mlp_hidden();

    params_.add("in_proj.w", init_linear(cfg_.latent_dim + cfg_.concat_extra_dim, h, rng));
    params_.add("in_proj.b", Tensor({h}));
    if (cfg_.task_embedding) params_.add("task_emb", Tensor::randn({cfg_.n_tasks, h}, rng));
    params_.add("t_proj.w", init_linear(cfg_.time_embed_dim, h, rng));
    params_.add("t_proj.b", Tensor({h}));
    if (cfg_.interval_embedding) {
        params_.add("r_proj.w", init_linear(cfg_.time_embed_dim, h, rng));
        params_.add("r_proj.b", Tensor({h}));
    }
    for (int64_t i = 0; i < cfg_.layers; ++i) {
        std::string pfx = layer_name(i);
        params_.add(pfx + ".ln1.g", Tensor({h}, 1.0));
        params_.add(pfx + ".bias_self.w", init_linear(h, h, rng));
        params_.add(pfx + ".bias_self.b", Tensor({h}));
        for (const char* nm : {".self.wq", ".self.wk", ".self.wv", ".self.wo"})
            params_.add(pfx + nm, init_linear(h, h, rng));
        for (const char* nm : {".self.bq", ".self.bk", ".self.bv", ".self.bo"})
            params_.add(pfx + nm, Tensor({h}));
        if (c > 0) {
            params_.add(pfx + ".ln2.g", Tensor({h}, 1.0));
            params_.add(pfx + ".bias_cross.w", init_linear(h, h, rng));
            params_.add(pfx + ".bias_cross.b", Tensor({h}));
            params_.add(pfx + ".cross.wq", init_linear(h, h, rng));
            params_.add(pfx + ".cross.wk", init_linear(c, h, rng));
            params_.add(pfx + ".cross.wv", init_linear(c, h, rng));
            params_.add(pfx + ".cross.wo", init_linear(h, h, rng));
            for (const char* nm : {".cross.bq", ".cross.bk", ".cross.bv", ".cross.bo"})
                params_.add(pfx + nm, Tensor({h}));
        }
        params_.add(pfx + ".ln3.g", Tensor({h}, 1.0));
        params_.add(pfx + ".bias_mlp.w", init_linear(h, h, rng));
        params_.add(pfx + ".bias_mlp.b", Tensor({h}));
        params_.add(pfx + ".mlp.w1", init_linear(h, mh, rng));
        params_.add(pfx + ".mlp.b1", Tensor({mh}));
        params_.add(pfx + ".mlp.w3", init_linear(h, mh, rng));
        params_.add(pfx + ".mlp.b3", Tensor({mh}));
        params_.add(pfx + ".mlp.w2", init_linear(mh, h, rng));
        params_.add(pfx + ".mlp.b2", Tensor({h}));
    }
    params_.add("final.ln.g", Tensor({h}, 1.0));
    params_.add("out_proj.w", init_linear(h, cfg_.latent_dim, rng));
    params_.add("out_proj.b", Tensor({cfg_.latent_dim}));
}

ConditionBundle DiT::embed_conditions(Graph& g, const BoundParams& p, int64_t task_index, Var t,
                                      std::optional<Var> r,
                                      const ConditionPayload& payload) const {
    check(task_index >= 0 && task_index < cfg_.n_tasks, ErrorKind::domain,
          "unknown task index " + std::to_string(task_index));
    const Tensor& tt = t.value();
    check(tt.rank() == 1, ErrorKind::shape, "timestep input must be rank-1 [B]");
    const int64_t B = tt.dim(0);

    Var global = g.linear(g.sinusoid_embed(t, cfg_.time_embed_dim), p.at("t_proj.w"),
                          p.at("t_proj.b")); // [B, hidden]
    if (cfg_.interval_embedding) {
        check(r.has_value(), ErrorKind::config, "this model expects the interval scalar r");
        Var re = g.linear(g.sinusoid_embed(*r, cfg_.time_embed_dim), p.at("r_proj.w"),
                          p.at("r_proj.b"));
        global = g.add(global, re);
    }
    if (cfg_.task_embedding)
        global = g.add_bias(global, g.select_row(p.at("task_emb"), task_index));

    ConditionBundle bundle;
    bundle.global = global;
    if (payload.concat.has_value()) {
        const Tensor& pc = *payload.concat;
        check(pc.rank() == 3, ErrorKind::shape, "concat payload must be [B,frames,w]");
        check(pc.dim(0) == B, ErrorKind::shape, "concat payload batch mismatch");
        check(pc.dim(2) <= cfg_.concat_extra_dim, ErrorKind::shape,
              "concat payload wider than concat_extra_dim");
        Tensor padded({pc.dim(0), pc.dim(1), cfg_.concat_extra_dim});
        for (int64_t bl = 0; bl < pc.dim(0) * pc.dim(1); ++bl)
            std::copy(pc.data.begin() + bl * pc.dim(2), pc.data.begin() + (bl + 1) * pc.dim(2),
                      padded.data.begin() + bl * cfg_.concat_extra_dim);
        bundle.concat = g.constant(padded);
    }
    if (payload.cross.has_value()) {
        check(cfg_.cross_dim > 0, ErrorKind::config,
              "cross payload supplied but the model has no cross-attention route");
        const Tensor& pc = *payload.cross;
        check(pc.rank() == 3 && pc.dim(2) == cfg_.cross_dim, ErrorKind::shape,
              "cross payload must be [B,M,cross_dim]");
        bundle.cross = g.constant(pc);
    }
    return bundle;
}

Var DiT::forward(Graph& g, const BoundParams& p, Var z_t, const ConditionBundle& cond, bool train,
                 Rng* rng) const {
    const Tensor& tz = z_t.value();
    check(tz.rank() == 3 && tz.dim(2) == cfg_.latent_dim, ErrorKind::shape,
          "dit: z_t must be [B,frames,latent]");
    const int64_t B = tz.dim(0), frames = tz.dim(1);
    check(!train || rng != nullptr || cfg_.dropout == 0.0, ErrorKind::config,
          "dit: training forward with dropout needs an rng");

    Var x;
    if (cond.concat.has_value()) {
        const Tensor& tc = cond.concat->value();
        check(tc.dim(1) == frames, ErrorKind::shape,
              "dit: concat condition frame count " + std::to_string(tc.dim(1)) +
                  " != latent frame count " + std::to_string(frames));
        x = g.concat_last({z_t, *cond.concat});
    } else if (cfg_.concat_extra_dim > 0) {
        x = g.concat_last({z_t, g.constant(Tensor({B, frames, cfg_.concat_extra_dim}))});
    } else {
        x = z_t;
    }
    x = g.linear(x, p.at("in_proj.w"), p.at("in_proj.b"));

    auto dropout_mask = [&](Var v) {
        if (!train || cfg_.dropout == 0.0) return v;
        Tensor mask(v.value().shape);
        double keep = 1.0 - cfg_.dropout;
        for (double& m : mask.data) m = rng->bernoulli(keep) ? 1.0 / keep : 0.0;
        return g.mul(v, g.constant(mask));
    };

    for (int64_t i = 0; i < cfg_.layers; ++i) {
        std::string pfx = layer_name(i);
        // self-attention with rotary positions
        {
            Var u = g.rms_norm(x, p.at(pfx + ".ln1.g"));
            u = g.add_rowvec(u, g.linear(cond.global, p.at(pfx + ".bias_self.w"),
                                         p.at(pfx + ".bias_self.b")));
            Var q = g.rope(g.linear(u, p.at(pfx + ".self.wq"), p.at(pfx + ".self.bq")), cfg_.heads);
            Var k = g.rope(g.linear(u, p.at(pfx + ".self.wk"), p.at(pfx + ".self.bk")), cfg_.heads);
            Var v = g.linear(u, p.at(pfx + ".self.wv"), p.at(pfx + ".self.bv"));
            Var a = g.attention(q, k, v, cfg_.heads);
            a = g.linear(a, p.at(pfx + ".self.wo"), p.at(pfx + ".self.bo"));
            x = g.add(x, dropout_mask(a));
        }
        // cross-attention only when the task supplies a cross sequence
        if (cond.cross.has_value()) {
            check(cfg_.cross_dim > 0, ErrorKind::config, "dit: model has no cross route");
            Var u = g.rms_norm(x, p.at(pfx + ".ln2.g"));
            u = g.add_rowvec(u, g.linear(cond.global, p.at(pfx + ".bias_cross.w"),
                                         p.at(pfx + ".bias_cross.b")));
            Var q = g.linear(u, p.at(pfx + ".cross.wq"), p.at(pfx + ".cross.bq"));
            Var k = g.linear(*cond.cross, p.at(pfx + ".cross.wk"), p.at(pfx + ".cross.bk"));
            Var v = g.linear(*cond.cross, p.at(pfx + ".cross.wv"), p.at(pfx + ".cross.bv"));
            Var a = g.attention(q, k, v, cfg_.heads);
            a = g.linear(a, p.at(pfx + ".cross.wo"), p.at(pfx + ".cross.bo"));
            x = g.add(x, dropout_mask(a));
        }
        // gated MLP
        {
            Var u = g.rms_norm(x, p.at(pfx + ".ln3.g"));
            u = g.add_rowvec(u, g.linear(cond.global, p.at(pfx + ".bias_mlp.w"),
                                         p.at(pfx + ".bias_mlp.b")));
            Var gate = g.silu(g.linear(u, p.at(pfx + ".mlp.w1"), p.at(pfx + ".mlp.b1")));
            Var lin = g.linear(u, p.at(pfx + ".mlp.w3"), p.at(pfx + ".mlp.b3"));
            Var m = g.linear(g.mul(gate, lin), p.at(pfx + ".mlp.w2"), p.at(pfx + ".mlp.b2"));
            x = g.add(x, dropout_mask(m));
        }
    }
    x = g.rms_norm(x, p.at("final.ln.g"));
    return g.linear(x, p.at("out_proj.w"), p.at("out_proj.b"));
}

Tensor DiT::forward_eval(const Tensor& z_t, int64_t task_index, double t, std::optional<double> r,
                         const ConditionPayload& payload) const {
    Graph g;
    BoundParams p = bind_params(g, params_, false);
    const int64_t B = z_t.dim(0);
    Var tv = g.constant(Tensor({B}, t));
    std::optional<Var> rv;
    if (r.has_value()) rv = g.constant(Tensor({B}, *r));
    ConditionBundle bundle = embed_conditions(g, p, task_index, tv, rv, payload);
    Var out = forward(g, p, g.constant(z_t), bundle);
    return g.value(out);
}

} // namespace latgen::dit
