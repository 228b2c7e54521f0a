#pragma once

#include <optional>

#include "latgen/rng.hpp"
#include "latgen/tensor.hpp"

namespace latgen::dit {

struct DiTConfig {
    int64_t layers = 4;
    int64_t heads = 4;
    int64_t hidden = 128;
    int64_t latent_dim = 16;
    int64_t concat_extra_dim = 32; // width of concatenated condition latents
    int64_t cross_dim = 64;        // 0 disables the cross-attention sublayers
    int64_t n_tasks = 4;
    int64_t time_embed_dim = 64;
    double mlp_ratio = 4.0; // gated MLP: two in-projections plus one out
    double dropout = 0.1;
    bool interval_embedding = false; // second scalar r (mean-flow models)
    bool task_embedding = true;      // disabled by the task-ID ablation arm

    static DiTConfig toy();
    // paper-scale preset: 32 layers, 24 heads, hidden 1536; used for
    // parameter-count arithmetic, not for training
    static DiTConfig full();

    void validate() const;
    int64_t mlp_hidden() const { return static_cast<int64_t>(mlp_ratio * hidden); }
    // analytic parameter count; allocates nothing
    int64_t param_count() const;
};

// Per-item conditioning payload prepared by the task pipeline. Widths are the
// natural per-task widths; the model zero-pads concat to concat_extra_dim.
struct ConditionPayload {
    std::optional<Tensor> concat; // [B, frames, w], w <= concat_extra_dim
    std::optional<Tensor> cross;  // [B, M, cross_dim]
    int64_t task_index = 0;
};

// Graph-resident conditioning routes for one forward pass.
struct ConditionBundle {
    std::optional<Var> concat; // [B, frames, concat_extra_dim]
    std::optional<Var> cross;  // [B, M, cross_dim]
    Var global;                // [B, hidden]; task + timestep embeddings
};

class DiT {
public:
    DiT(DiTConfig cfg, uint64_t seed);

    const DiTConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    // global_vec = task embedding + proj(sinusoid(t)) [+ proj(sinusoid(r))];
    // t (and r) enter as graph vars so tangents can flow through them
    ConditionBundle embed_conditions(Graph& g, const BoundParams& p, int64_t task_index, Var t,
                                     std::optional<Var> r, const ConditionPayload& payload) const;

    // pre-norm blocks: self-attention with rotary positions, optional
    // cross-attention, gated MLP; the global condition enters as a per-sublayer
    // additive bias after normalization
    Var forward(Graph& g, const BoundParams& p, Var z_t, const ConditionBundle& cond,
                bool train = false, Rng* rng = nullptr) const;

    // eval convenience: builds a throwaway graph
    Tensor forward_eval(const Tensor& z_t, int64_t task_index, double t, std::optional<double> r,
                        const ConditionPayload& payload) const;

private:
    DiTConfig cfg_;
    ParamStore params_;
};

} // namespace latgen::dit
