#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "latgen/rng.hpp"

namespace latgen {

enum class ErrorKind {
    shape,       // dimension mismatch between operands
    config,      // invalid configuration value
    domain,      // argument outside the operation's domain
    io,          // file / format problems
    unsupported, // operation has no rule for the requested mode
    parse,       // malformed config / CLI input
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

// Dense row-major f64 tensor. Rank 0 is a scalar with one element.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> data;
    bool requires_grad = false;

    Tensor() : data(1, 0.0) { shape = {1}; }
    explicit Tensor(std::vector<int64_t> s, double fill = 0.0);

    static Tensor scalar(double v);
    static Tensor from(std::vector<int64_t> s, std::vector<double> values);
    static Tensor randn(std::vector<int64_t> s, Rng& rng, double stddev = 1.0);

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    double item() const;

    Tensor& set_requires_grad(bool v) {
        requires_grad = v;
        return *this;
    }
};

int64_t shape_numel(const std::vector<int64_t>& shape);
std::string shape_str(const std::vector<int64_t>& shape);

class Graph;

// Handle into a Graph. Cheap to copy; invalid when default-constructed.
struct Var {
    Graph* g = nullptr;
    int id = -1;

    bool valid() const { return g != nullptr && id >= 0; }
    const Tensor& value() const;
};

// Extension point for operations whose forward/backward live outside the
// engine (the spectral losses use this). `tangent` may be left empty, in
// which case forward-mode through the op raises ErrorKind::unsupported.
struct CustomRule {
    std::function<void(const Tensor& out_value, const std::vector<double>& out_grad,
                       const std::vector<const Tensor*>& inputs,
                       const std::vector<std::vector<double>*>& input_grads)>
        backward;
    std::function<void(const Tensor& out_value, const std::vector<const Tensor*>& inputs,
                       const std::vector<const std::vector<double>*>& input_tangents,
                       std::vector<double>& out_tangent)>
        tangent;
};

// Tape of operation records. Supports one reverse sweep (backward) and one
// forward-mode sweep (tangents) over the same records. Single-writer: build,
// backward and tangent passes must not run concurrently on one instance;
// independent graphs are safe on separate threads.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // --- graph inputs -----------------------------------------------------
    Var leaf(const Tensor& t);     // requires_grad taken from the tensor
    Var constant(const Tensor& t); // never receives gradient

    // --- elementwise ------------------------------------------------------
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double c);
    Var add_scalar(Var a, double c);
    Var mul_scalar_var(Var x, Var s); // s has one element
    Var exp(Var a);
    Var silu(Var a);
    Var leaky_relu(Var a, double slope);
    Var snake(Var x, Var alpha); // x: [B,C,L], alpha: [C], alpha > 0

    // --- shape ------------------------------------------------------------
    Var reshape(Var a, std::vector<int64_t> shape);
    Var concat_last(const std::vector<Var>& xs);
    Var slice_last(Var x, int64_t from, int64_t to);
    Var slice_channels(Var x, int64_t c0, int64_t c1); // dim 1 of a rank-3 tensor
    Var transpose_12(Var x);                           // [B,C,L] <-> [B,L,C]

    // --- reductions / broadcast -------------------------------------------
    Var sum(Var a);
    Var mean(Var a);
    Var add_bias(Var x, Var b);    // [..., D] + [D]
    Var add_rowvec(Var x, Var v);  // [B,L,D] + [B,D], broadcast over L

    // --- neural-net blocks --------------------------------------------------
    Var linear(Var x, Var w, std::optional<Var> b = std::nullopt); // [..,I]x[I,O]
    Var conv1d(Var x, Var w, std::optional<Var> b, int64_t stride, int64_t padding);
    Var conv_transpose1d(Var x, Var w, std::optional<Var> b, int64_t stride, int64_t padding);
    Var rms_norm(Var x, Var gain, double eps = 1e-8);
    Var rope(Var x, int64_t heads, double theta = 10000.0); // per-head pair rotations
    Var attention(Var q, Var k, Var v, int64_t heads);      // softmax(QK^T/sqrt(dh))V
    Var select_row(Var table, int64_t row);                 // [N,D] -> [D]
    Var sinusoid_embed(Var t, int64_t dim, double scale = 100.0); // [B] -> [B,dim]

    Var stop_gradient(Var x);
    Var custom(const std::string& name, const std::vector<Var>& inputs, Tensor value,
               CustomRule rule);

    // --- passes -------------------------------------------------------------
    // Reverse sweep from a scalar loss. Resets all gradient buffers first, so
    // repeated calls over the same tape are bitwise identical.
    void backward(Var scalar_loss);
    const Tensor& grad(Var v);

    // Forward-mode: seed directions on leaves, then propagate.
    void seed_tangent(Var leaf, const Tensor& direction);
    void run_tangent();
    Tensor tangent(Var v) const;

    const Tensor& value(Var v) const;
    size_t size() const { return nodes_.size(); }

    // internal node record (exposed for the op implementations in tensor.cpp)
    struct Node {
        std::string op;
        std::vector<int> inputs;
        Tensor value;
        std::vector<double> grad;    // allocated iff requires_grad
        std::vector<double> tangent; // allocated lazily by the tangent pass
        bool requires_grad = false;
        bool is_leaf = false;
        bool tangent_seeded = false;
        std::function<void(Graph&, int)> backward_fn;
        std::function<void(Graph&, int)> tangent_fn; // empty => unsupported in jvp
    };

    Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }

private:
    friend struct Var;
    int push(Node n);
    Var make(std::string op, std::vector<int> inputs, Tensor value,
             std::function<void(Graph&, int)> bwd, std::function<void(Graph&, int)> tan);

    std::vector<Node> nodes_;
    std::vector<Tensor> grad_views_; // scratch for grad() return-by-ref
    bool backward_ran_ = false;
};

// value f(at) and the directional derivative J_f(at) . direction, both by a
// single forward pass with forward-mode tangents.
std::pair<Tensor, Tensor> jvp(const std::function<Var(Graph&, Var)>& f, const Tensor& at,
                              const Tensor& direction);

// --- named parameter sets ----------------------------------------------------

// Ordered name -> tensor map. Iteration order is the container order, which
// keeps graph construction (and so all numerics) deterministic.
struct ParamStore {
    std::map<std::string, Tensor> params;

    Tensor& add(const std::string& name, Tensor init);
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool has(const std::string& name) const { return params.count(name) > 0; }
    int64_t total_elements() const;
};

struct BoundParams {
    std::map<std::string, Var> vars;
    Var at(const std::string& name) const;
    bool has(const std::string& name) const { return vars.count(name) > 0; }
};

// Insert every parameter into the graph, as trainable leaves or constants.
BoundParams bind_params(Graph& g, const ParamStore& store, bool trainable);

// Gradients for every bound parameter after backward(); zeros when untouched.
std::map<std::string, Tensor> collect_grads(Graph& g, const BoundParams& bound);

// FNV-1a over names, shapes and raw f64 bytes; used by the frozen-VAE checks.
uint64_t param_fingerprint(const ParamStore& store);

} // namespace latgen
