#include "latgen/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <numeric>
#include <sstream>

namespace latgen {

namespace {

void check(bool ok, ErrorKind kind, const std::string& msg) {
    if (!ok) throw Error(kind, msg);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

} // namespace

int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

Tensor::Tensor(std::vector<int64_t> s, double fill) : shape(std::move(s)) {
    for (int64_t d : shape)
        check(d >= 1, ErrorKind::shape, "tensor dimensions must be >= 1, got " + shape_str(shape));
    data.assign(static_cast<size_t>(shape_numel(shape)), fill);
}

Tensor Tensor::scalar(double v) {
    Tensor t(std::vector<int64_t>{1});
    t.data[0] = v;
    return t;
}

Tensor Tensor::from(std::vector<int64_t> s, std::vector<double> values) {
    Tensor t;
    t.shape = std::move(s);
    for (int64_t d : t.shape)
        check(d >= 1, ErrorKind::shape, "tensor dimensions must be >= 1");
    check(shape_numel(t.shape) == static_cast<int64_t>(values.size()), ErrorKind::shape,
          "value count does not match shape " + shape_str(t.shape));
    t.data = std::move(values);
    return t;
}

Tensor Tensor::randn(std::vector<int64_t> s, Rng& rng, double stddev) {
    Tensor t(std::move(s));
    for (double& v : t.data) v = rng.normal() * stddev;
    return t;
}

double Tensor::item() const {
    check(numel() == 1, ErrorKind::shape, "item() requires a single-element tensor");
    return data[0];
}

const Tensor& Var::value() const { return g->value(*this); }

// ---------------------------------------------------------------------------
// Graph core
// ---------------------------------------------------------------------------

int Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

Var Graph::make(std::string op, std::vector<int> inputs, Tensor value,
                std::function<void(Graph&, int)> bwd, std::function<void(Graph&, int)> tan) {
    Node n;
    n.op = std::move(op);
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    for (int i : n.inputs)
        if (nodes_[static_cast<size_t>(i)].requires_grad) n.requires_grad = true;
    if (n.requires_grad) n.backward_fn = std::move(bwd);
    n.tangent_fn = std::move(tan);
    return Var{this, push(std::move(n))};
}

Var Graph::leaf(const Tensor& t) {
    Node n;
    n.op = "leaf";
    n.value = t;
    n.requires_grad = t.requires_grad;
    n.is_leaf = true;
    return Var{this, push(std::move(n))};
}

Var Graph::constant(const Tensor& t) {
    Node n;
    n.op = "constant";
    n.value = t;
    n.value.requires_grad = false;
    n.is_leaf = true;
    return Var{this, push(std::move(n))};
}

const Tensor& Graph::value(Var v) const { return node(v.id).value; }

namespace {

// gradient buffer of an input node, or nullptr when it does not need one
std::vector<double>* grad_buf(Graph& g, int id) {
    Graph::Node& n = g.node(id);
    if (!n.requires_grad) return nullptr;
    if (n.grad.size() != n.value.data.size()) n.grad.assign(n.value.data.size(), 0.0);
    return &n.grad;
}

const std::vector<double>& tan_buf(Graph& g, int id) { return g.node(id).tangent; }

} // namespace

void Graph::backward(Var scalar_loss) {
    check(scalar_loss.g == this, ErrorKind::domain, "loss belongs to another graph");
    const Node& loss = node(scalar_loss.id);
    check(loss.value.numel() == 1, ErrorKind::shape,
          "backward requires a scalar loss, got shape " + shape_str(loss.value.shape));

    for (Node& n : nodes_) {
        if (n.requires_grad)
            n.grad.assign(n.value.data.size(), 0.0);
        else
            n.grad.clear();
    }
    if (!node(scalar_loss.id).requires_grad) {
        backward_ran_ = true;
        return; // loss does not depend on any trainable leaf
    }
    node(scalar_loss.id).grad.assign(1, 1.0);
    for (int id = scalar_loss.id; id >= 0; --id) {
        Node& n = node(id);
        if (!n.requires_grad || n.is_leaf || !n.backward_fn) continue;
        n.backward_fn(*this, id);
    }
    backward_ran_ = true;
}

const Tensor& Graph::grad(Var v) {
    Node& n = node(v.id);
    grad_views_.emplace_back();
    Tensor& out = grad_views_.back();
    out.shape = n.value.shape;
    if (n.grad.size() == n.value.data.size())
        out.data = n.grad;
    else
        out.data.assign(n.value.data.size(), 0.0);
    return out;
}

void Graph::seed_tangent(Var leaf_var, const Tensor& direction) {
    Node& n = node(leaf_var.id);
    check(n.is_leaf, ErrorKind::domain, "tangent seeds attach to leaves only");
    check(direction.shape == n.value.shape, ErrorKind::shape,
          "tangent direction shape " + shape_str(direction.shape) + " != value shape " +
              shape_str(n.value.shape));
    n.tangent = direction.data;
    n.tangent_seeded = true;
}

void Graph::run_tangent() {
    for (size_t id = 0; id < nodes_.size(); ++id) {
        Node& n = nodes_[id];
        if (n.is_leaf) {
            if (!n.tangent_seeded) n.tangent.assign(n.value.data.size(), 0.0);
            continue;
        }
        n.tangent.assign(n.value.data.size(), 0.0);
        if (!n.tangent_fn)
            throw Error(ErrorKind::unsupported,
                        "op '" + n.op + "' has no forward-mode tangent rule");
        n.tangent_fn(*this, static_cast<int>(id));
    }
}

Tensor Graph::tangent(Var v) const {
    const Node& n = node(v.id);
    Tensor out;
    out.shape = n.value.shape;
    if (n.tangent.size() == n.value.data.size())
        out.data = n.tangent;
    else
        out.data.assign(n.value.data.size(), 0.0);
    return out;
}

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

Var Graph::add(Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    check(ta.same_shape(tb), ErrorKind::shape,
          "add: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
    Tensor out;
    out.shape = ta.shape;
    out.data.resize(ta.data.size());
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] + tb.data[i];
    int ia = a.id, ib = b.id;
    return make(
        "add", {ia, ib}, std::move(out),
        [ia, ib](Graph& g, int self) {
            const auto& go = g.node(self).grad;
            if (auto* ga = grad_buf(g, ia))
                for (size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i];
            if (auto* gb = grad_buf(g, ib))
                for (size_t i = 0; i < go.size(); ++i) (*gb)[i] += go[i];
        },
        [ia, ib](Graph& g, int self) {
            auto& t = g.node(self).tangent;
            const auto& tx = tan_buf(g, ia);
            const auto& ty = tan_buf(g, ib);
            for (size_t i = 0; i < t.size(); ++i) t[i] = tx[i] + ty[i];
        });
}

Var Graph::sub(Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    check(ta.same_shape(tb), ErrorKind::shape,
          "sub: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
    Tensor out;
    out.shape = ta.shape;
    out.data.resize(ta.data.size());
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] - tb.data[i];
    int ia = a.id, ib = b.id;
    return make(
        "sub", {ia, ib}, std::move(out),
        [ia, ib](Graph& g, int self) {
            const auto& go = g.node(self).grad;
            if (auto* ga = grad_buf(g, ia))
                for (size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i];
            if (auto* gb = grad_buf(g, ib))
                for (size_t i = 0; i < go.size(); ++i) (*gb)[i] -= go[i];
        },
        [ia, ib](Graph& g, int self) {
            auto& t = g.node(self).tangent;
            const auto& tx = tan_buf(g, ia);
            const auto& ty = tan_buf(g, ib);
            for (size_t i = 0; i < t.size(); ++i) t[i] = tx[i] - ty[i];
        });
}

Var Graph::mul(Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    check(ta.same_shape(tb), ErrorKind::shape,
          "mul: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
    Tensor out;
    out.shape = ta.shape;
    out.data.resize(ta.data.size());
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] * tb.data[i];
    int ia = a.id, ib = b.id;
    return make(
        "mul", {ia, ib}, std::move(out),
        [ia, ib](Graph& g, int self) {
            const auto& go = g.node(self).grad;
            const auto& va = g.node(ia).value.data;
            const auto& vb = g.node(ib).value.data;
            if (auto* ga = grad_buf(g, ia))
                for (size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i] * vb[i];
            if (auto* gb = grad_buf(g, ib))
                for (size_t i = 0; i < go.size(); ++i) (*gb)[i] += go[i] * va[i];
        },
        [ia, ib](Graph& g, int self) {
            auto& t = g.node(self).tangent;
            const auto& va = g.node(ia).value.data;
            const auto& vb = g.node(ib).value.data;
            const auto& tx = tan_buf(g, ia);
            const auto& ty = tan_buf(g, ib);
            for (size_t i = 0; i < t.size(); ++i) t[i] = tx[i] * vb[i] + va[i] * ty[i];
        });
}

Var Graph::scale(Var a, double c) {
    const Tensor& ta = value(a);
    Tensor out;
    out.shape = ta.shape;
    out.data.resize(ta.data.size());
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = c * ta.data[i];
    int ia = a.id;
    return make(
        "scale", {ia}, std::move(out),
        [ia, c](Graph& g, int self) {
            const auto& go = g.node(self).grad;
            if (auto* ga = grad_buf(g, ia))
                for (size_t i = 0; i < go.size(); ++i) (*ga)[i] += c * go[i];
        },
        [ia, c](Graph& g, int self) {
            auto& t = g.node(self).tangent;
            const auto& tx = tan_buf(g, ia);
            for (size_t i = 0; i < t.size(); ++i) t[i] = c * tx[i];
        });
}

Var Graph::add_scalar(Var a, double c) {
    const Tensor& ta = value(a);
    Tensor out;
    out.shape = ta.shape;
    out.data.resize(ta.data.size());
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] + c;
    int ia = a.id;
    return make(
        "add_scalar", {ia}, std::move(out),
        [ia](Graph& g, int self) {
            const auto& go = g.node(self).grad;
            if (auto* ga = grad_buf(g, ia))
                for (size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i];
        },
        [ia](Graph& g, int self) {
            auto& t = g.node(self).tangent;
            const auto& tx = tan_buf(g, ia);
            for (size_t i = 0; i < t.size(); ++i) t[i] = tx[i];
        });
}

Var Graph::mul_scalar_var(Var x, Var s) {
    const Tensor& tx = value(x);
    const Tensor& ts = value(s);
    check(ts.numel() == 1, ErrorKind::shape, "mul_scalar_var: scalar operand must have one element");
    double sv = ts.data[0];
    Tensor out;
    out.shape = tx.shape;
    out.data.resize(tx.data.size());
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = sv * tx.data[i];
    int ix = x.id, is = s.id;
    return make(
        "mul_scalar_var", {ix, is}, std::move(out),
        [ix, is, sv](Graph& g, int self) {
            const auto& go = g.node(self).grad;
            const auto& vx = g.node(ix).value.data;
            if (auto* gx = grad_buf(g, ix))
                for (size_t i = 0; i < go.size(); ++i) (*gx)[i] += sv * go[i];
            if (auto* gs = grad_buf(g, is)) {
                double acc = 0.0;
                for (size_t i = 0; i < go.size(); ++i) acc += go[i] * vx[i];
                (*gs)[0] += acc;
            }
        },
        [ix, is, sv](Graph& g, int self) {
            auto& t = g.node(self).tangent;
            const auto& vx = g.node(ix).value.data;
            const auto& txn = tan_buf(g, ix);
            double tsv = tan_buf(g, is)[0];
            for (size_t i = 0; i < t.size(); ++i) t[i] = sv * txn[i] + tsv * vx[i];
        });
}

Var Graph::exp(Var a) {
    const Tensor& ta = value(a);
    Tensor out;
    out.shape = ta.shape;
    out.data.resize(ta.data.size());
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::exp(ta.data[i]);
    int ia = a.id;
    return make(
        "exp", {ia}, std::move(out),
        [ia](Graph& g, int self) {
            const auto& go = g.node(self).grad;
            const auto& vo = g.node(self).value.data;
            if (auto* ga = grad_buf(g, ia))
                for (size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i] * vo[i];
        },
        [ia](Graph& g, int self) {
            auto& t = g.node(self).tangent;
            const auto& vo = g.node(self).value.data;
            const auto& tx = tan_buf(g, ia);
            for (size_t i = 0; i < t.size(); ++i) t[i] = vo[i] * tx[i];
        });
}

Var Graph::silu(Var a) {
    const Tensor& ta = value(a);
    Tensor out;
    out.shape = ta.shape;
    out.data.resize(ta.data.size());
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] * sigmoid(ta.data[i]);
    int ia = a.id;
    auto dfun = [](double x) {
        double s = sigmoid(x);
        return s * (1.0 + x * (1.0 - s));
    };
    return make(
        "silu", {ia}, std::move(out),
        [ia, dfun](Graph& g, int self) {
            const auto& go = g.node(self).grad;
            const auto& vx = g.node(ia).value.data;
            if (auto* ga = grad_buf(g, ia))
                for (size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i] * dfun(vx[i]);
        },
        [ia, dfun](Graph& g, int self) {
            auto& t = g.node(self).tangent;
            const auto& vx = g.node(ia).value.data;
            const auto& tx = tan_buf(g, ia);
            for (size_t i = 0; i < t.size(); ++i) t[i] = dfun(vx[i]) * tx[i];
        });
}

Var Graph::leaky_relu(Var a, double slope) {
    const Tensor& ta = value(a);
    Tensor out;
    out.shape = ta.shape;
    out.data.resize(ta.data.size());
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = ta.data[i] > 0.0 ? ta.data[i] : slope * ta.data[i];
    int ia = a.id;
    return make(
        "leaky_relu", {ia}, std::move(out),
        [ia, slope](Graph& g, int self) {
            const auto& go = g.node(self).grad;
            const auto& vx = g.node(ia).value.data;
            if (auto* ga = grad_buf(g, ia))
                for (size_t i = 0; i < go.size(); ++i)
                    (*ga)[i] += go[i] * (vx[i] > 0.0 ? 1.0 : slope);
        },
        [ia, slope](Graph& g, int self) {
            auto& t = g.node(self).tangent;
            const auto& vx = g.node(ia).value.data;
            const auto& tx = tan_buf(g, ia);
            for (size_t i = 0; i < t.size(); ++i) t[i] = tx[i] * (vx[i] > 0.0 ? 1.0 : slope);
        });
}

Var Graph::snake(Var x, Var alpha) {
    const Tensor& tx = value(x);
    const Tensor& ta = value(alpha);
    check(tx.rank() == 3, ErrorKind::shape, "snake expects [B,C,L]");
    check(ta.rank() == 1 && ta.dim(0) == tx.dim(1), ErrorKind::shape,
          "snake: alpha must have one entry per channel");
    for (double v : ta.data) check(v > 0.0, ErrorKind::domain, "snake: alpha must be positive");
    int64_t B = tx.dim(0), C = tx.dim(1), L = tx.dim(2);
    Tensor out;
    out.shape = tx.shape;
    out.data.resize(tx.data.size());
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
            double al = ta.data[static_cast<size_t>(c)];
            const double* xi = tx.data.data() + (b * C + c) * L;
            double* yo = out.data.data() + (b * C + c) * L;
            for (int64_t l = 0; l < L; ++l) {
                double s = std::sin(al * xi[l]);
                yo[l] = xi[l] + s * s / al;
            }
        }
    int ix = x.id, ia = alpha.id;
    return make(
        "snake", {ix, ia}, std::move(out),
        [ix, ia, B, C, L](Graph& g, int self) {
            const auto& go = g.node(self).grad;
            const auto& vx = g.node(ix).value.data;
            const auto& va = g.node(ia).value.data;
            auto* gx = grad_buf(g, ix);
            auto* ga = grad_buf(g, ia);
            for (int64_t b = 0; b < B; ++b)
                for (int64_t c = 0; c < C; ++c) {
                    double al = va[static_cast<size_t>(c)];
                    size_t base = static_cast<size_t>((b * C + c) * L);
                    double acc_a = 0.0;
                    for (int64_t l = 0; l < L; ++l) {
                        double xv = vx[base + l];
                        double gv = go[base + l];
                        double s = std::sin(al * xv);
                        double s2 = std::sin(2.0 * al * xv);
                        if (gx) (*gx)[base + l] += gv * (1.0 + s2);
                        if (ga) acc_a += gv * (xv * s2 / al - s * s / (al * al));
                    }
                    if (ga) (*ga)[static_cast<size_t>(c)] += acc_a;
                }
        },
        [ix, ia, B, C, L](Graph& g, int self) {
            auto& t = g.node(self).tangent;
            const auto& vx = g.node(ix).value.data;
            const auto& va = g.node(ia).value.data;
            const auto& txn = tan_buf(g, ix);
            const auto& tan = tan_buf(g, ia);
            for (int64_t b = 0; b < B; ++b)
                for (int64_t c = 0; c < C; ++c) {
                    double al = va[static_cast<size_t>(c)];
                    double ta_c = tan[static_cast<size_t>(c)];
                    size_t base = static_cast<size_t>((b * C + c) * L);
                    for (int64_t l = 0; l < L; ++l) {
                        double xv = vx[base + l];
                        double s = std::sin(al * xv);
                        double s2 = std::sin(2.0 * al * xv);
                        t[base + l] = txn[base + l] * (1.0 + s2) +
                                      ta_c * (xv * s2 / al - s * s / (al * al));
                    }
                }
        });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

Var Graph::reshape(Var a, std::vector<int64_t> shape) {
    const Tensor& ta = value(a);
    check(shape_numel(shape) == ta.numel(), ErrorKind::shape,
          "reshape: element count mismatch " + shape_str(ta.shape) + " -> " + shape_str(shape));
    Tensor out;
    out.shape = std::move(shape);
    out.data = ta.data;
    int ia = a.id;
    return make(
        "reshape", {ia}, std::move(out),
        [ia](Graph& g, int self) {
            const auto& go = g.node(self).grad;
            if (auto* ga = grad_buf(g, ia))
                for (size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i];
        },
        [ia](Graph& g, int self) { g.node(self).tangent = tan_buf(g, ia); });
}

Var Graph::concat_last(const std::vector<Var>& xs) {
    check(!xs.empty(), ErrorKind::shape, "concat_last: no inputs");
    const Tensor& first = value(xs[0]);
    std::vector<int64_t> lead(first.shape.begin(), first.shape.end() - 1);
    int64_t rows = shape_numel(lead);
    int64_t total_d = 0;
    std::vector<int64_t> widths;
    std::vector<int> ids;
    for (const Var& v : xs) {
        const Tensor& t = value(v);
        check(t.rank() == first.rank(), ErrorKind::shape, "concat_last: rank mismatch");
        std::vector<int64_t> l2(t.shape.begin(), t.shape.end() - 1);
        check(l2 == lead, ErrorKind::shape, "concat_last: leading dims mismatch");
        widths.push_back(t.shape.back());
        total_d += t.shape.back();
        ids.push_back(v.id);
    }
    std::vector<int64_t> oshape = lead;
    oshape.push_back(total_d);
    Tensor out;
    out.shape = std::move(oshape);
    out.data.resize(static_cast<size_t>(rows * total_d));
    {
        int64_t off = 0;
        for (size_t j = 0; j < ids.size(); ++j) {
            const auto& src = node(ids[j]).value.data;
            int64_t w = widths[j];
            for (int64_t r = 0; r < rows; ++r)
                std::memcpy(out.data.data() + r * total_d + off, src.data() + r * w,
                            static_cast<size_t>(w) * sizeof(double));
            off += w;
        }
    }
    return make(
        "concat_last", ids, std::move(out),
        [ids, widths, rows, total_d](Graph& g, int self) {
            const auto& go = g.node(self).grad;
            int64_t off = 0;
            for (size_t j = 0; j < ids.size(); ++j) {
                int64_t w = widths[j];
                if (auto* gi = grad_buf(g, ids[j]))
                    for (int64_t r = 0; r < rows; ++r)
                        for (int64_t d = 0; d < w; ++d)
                            (*gi)[static_cast<size_t>(r * w + d)] +=
                                go[static_cast<size_t>(r * total_d + off + d)];
                off += w;
            }
        },
        [ids, widths, rows, total_d](Graph& g, int self) {
            auto& t = g.node(self).tangent;
            int64_t off = 0;
            for (size_t j = 0; j < ids.size(); ++j) {
                int64_t w = widths[j];
                const auto& ti = tan_buf(g, ids[j]);
                for (int64_t r = 0; r < rows; ++r)
                    std::memcpy(t.data() + r * total_d + off, ti.data() + r * w,
                                static_cast<size_t>(w) * sizeof(double));
                off += w;
            }
        });
}

Var Graph::slice_last(Var x, int64_t from, int64_t to) {
    const Tensor& tx = value(x);
    int64_t D = tx.shape.back();
    check(from >= 0 && to <= D && from < to, ErrorKind::shape, "slice_last: bad range");
    std::vector<int64_t> lead(tx.shape.begin(), tx.shape.end() - 1);
    int64_t rows = shape_numel(lead);
    int64_t w = to - from;
    std::vector<int64_t> oshape = lead;
    oshape.push_back(w);
    Tensor out;
    out.shape = std::move(oshape);
    out.data.resize(static_cast<size_t>(rows * w));
    for (int64_t r = 0; r < rows; ++r)
        std::memcpy(out.data.data() + r * w, tx.data.data() + r * D + from,
                    static_cast<size_t>(w) * sizeof(double));
    int ix = x.id;
    return make(
        "slice_last", {ix}, std::move(out),
        [ix, rows, w, D, from](Graph& g, int self) {
            const auto& go = g.node(self).grad;
            if (auto* gx = grad_buf(g, ix))
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t d = 0; d < w; ++d)
                        (*gx)[static_cast<size_t>(r * D + from + d)] +=
                            go[static_cast<size_t>(r * w + d)];
        },
        [ix, rows, w, D, from](Graph& g, int self) {
            auto& t = g.node(self).tangent;
            const auto& txn = tan_buf(g, ix);
            for (int64_t r = 0; r < rows; ++r)
                std::memcpy(t.data() + r * w, txn.data() + r * D + from,
                            static_cast<size_t>(w) * sizeof(double));
        });
}

Var Graph::slice_channels(Var x, int64_t c0, int64_t c1) {
    const Tensor& tx = value(x);
    check(tx.rank() == 3, ErrorKind::shape, "slice_channels expects [B,C,L]");
    int64_t B = tx.dim(0), C = tx.dim(1), L = tx.dim(2);
    check(c0 >= 0 && c1 <= C && c0 < c1, ErrorKind::shape, "slice_channels: bad range");
    int64_t w = c1 - c0;
    Tensor out(std::vector<int64_t>{B, w, L});
    for (int64_t b = 0; b < B; ++b)
        std::memcpy(out.data.data() + b * w * L, tx.data.data() + (b * C + c0) * L,
                    static_cast<size_t>(w * L) * sizeof(double));
    int ix = x.id;
    return make(
        "slice_channels", {ix}, std::move(out),
        [ix, B, C, L, c0, w](Graph& g, int self) {
            const auto& go = g.node(self).grad;
            if (auto* gx = grad_buf(g, ix))
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t i = 0; i < w * L; ++i)
                        (*gx)[static_cast<size_t>((b * C + c0) * L + i)] +=
                            go[static_cast<size_t>(b * w * L + i)];
        },
        [ix, B, C, L, c0, w](Graph& g, int self) {
            auto& t = g.node(self).tangent;
            const auto& txn = tan_buf(g, ix);
            for (int64_t b = 0; b < B; ++b)
                std::memcpy(t.data() + b * w * L, txn.data() + (b * C + c0) * L,
                            static_cast<size_t>(w * L) * sizeof(double));
        });
}

Var Graph::transpose_12(Var x) {
    const Tensor& tx = value(x);
    check(tx.rank() == 3, ErrorKind::shape, "transpose_12 expects rank 3");
    int64_t B = tx.dim(0), C = tx.dim(1), L = tx.dim(2);
    Tensor out(std::vector<int64_t>{B, L, C});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t l = 0; l < L; ++l)
                out.data[static_cast<size_t>((b * L + l) * C + c)] =
                    tx.data[static_cast<size_t>((b * C + c) * L + l)];
    int ix = x.id;
    return make(
        "transpose_12", {ix}, std::move(out),
        [ix, B, C, L](Graph& g, int self) {
            const auto& go = g.node(self).grad;
            if (auto* gx = grad_buf(g, ix))
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t c = 0; c < C; ++c)
                        for (int64_t l = 0; l < L; ++l)
                            (*gx)[static_cast<size_t>((b * C + c) * L + l)] +=
                                go[static_cast<size_t>((b * L + l) * C + c)];
        },
        [ix, B, C, L](Graph& g, int self) {
            auto& t = g.node(self).tangent;
            const auto& txn = tan_buf(g, ix);
            for (int64_t b = 0; b < B; ++b)
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t l = 0; l < L; ++l)
                        t[static_cast<size_t>((b * L + l) * C + c)] =
                            txn[static_cast<size_t>((b * C + c) * L + l)];
        });
}

// ---------------------------------------------------------------------------
// reductions / broadcast
// ---------------------------------------------------------------------------

Var Graph::sum(Var a) {
    const Tensor& ta = value(a);
    double s = 0.0;
    for (double v : ta.data) s += v;
    int ia = a.id;
    return make(
        "sum", {ia}, Tensor::scalar(s),
        [ia](Graph& g, int self) {
            double go = g.node(self).grad[0];
            if (auto* ga = grad_buf(g, ia))
                for (double& v : *ga) v += go;
        },
        [ia](Graph& g, int self) {
            const auto& tx = tan_buf(g, ia);
            double s2 = 0.0;
            for (double v : tx) s2 += v;
            g.node(self).tangent[0] = s2;
        });
}

Var Graph::mean(Var a) {
    const Tensor& ta = value(a);
    double n = static_cast<double>(ta.numel());
    double s = 0.0;
    for (double v : ta.data) s += v;
    int ia = a.id;
    return make(
        "mean", {ia}, Tensor::scalar(s / n),
        [ia, n](Graph& g, int self) {
            double go = g.node(self).grad[0] / n;
            if (auto* ga = grad_buf(g, ia))
                for (double& v : *ga) v += go;
        },
        [ia, n](Graph& g, int self) {
            const auto& tx = tan_buf(g, ia);
            double s2 = 0.0;
            for (double v : tx) s2 += v;
            g.node(self).tangent[0] = s2 / n;
        });
}

Var Graph::add_bias(Var x, Var b) {
    const Tensor& tx = value(x);
    const Tensor& tb = value(b);
    int64_t D = tx.shape.back();
    check(tb.rank() == 1 && tb.dim(0) == D, ErrorKind::shape,
          "add_bias: bias must match last dim " + std::to_string(D));
    int64_t rows = tx.numel() / D;
    Tensor out;
    out.shape = tx.shape;
    out.data.resize(tx.data.size());
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t d = 0; d < D; ++d)
            out.data[static_cast<size_t>(r * D + d)] =
                tx.data[static_cast<size_t>(r * D + d)] + tb.data[static_cast<size_t>(d)];
    int ix = x.id, ib = b.id;
    return make(
        "add_bias", {ix, ib}, std::move(out),
        [ix, ib, rows, D](Graph& g, int self) {
            const auto& go = g.node(self).grad;
            if (auto* gx = grad_buf(g, ix))
                for (size_t i = 0; i < go.size(); ++i) (*gx)[i] += go[i];
            if (auto* gb = grad_buf(g, ib))
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t d = 0; d < D; ++d)
                        (*gb)[static_cast<size_t>(d)] += go[static_cast<size_t>(r * D + d)];
        },
        [ix, ib, rows, D](Graph& g, int self) {
            auto& t = g.node(self).tangent;
            const auto& txn = tan_buf(g, ix);
            const auto& tbn = tan_buf(g, ib);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t d = 0; d < D; ++d)
                    t[static_cast<size_t>(r * D + d)] =
                        txn[static_cast<size_t>(r * D + d)] + tbn[static_cast<size_t>(d)];
        });
}

Var Graph::add_rowvec(Var x, Var v) {
    const Tensor& tx = value(x);
    const Tensor& tv = value(v);
    check(tx.rank() == 3, ErrorKind::shape, "add_rowvec expects [B,L,D]");
    int64_t B = tx.dim(0), L = tx.dim(1), D = tx.dim(2);
    check(tv.rank() == 2 && tv.dim(0) == B && tv.dim(1) == D, ErrorKind::shape,
          "add_rowvec: vector must be [B,D]");
    Tensor out;
    out.shape = tx.shape;
    out.data.resize(tx.data.size());
    for (int64_t b = 0; b < B; ++b)
        for (int64_t l = 0; l < L; ++l)
            for (int64_t d = 0; d < D; ++d)
                out.data[static_cast<size_t>(((b * L) + l) * D + d)] =
                    tx.data[static_cast<size_t>(((b * L) + l) * D + d)] +
                    tv.data[static_cast<size_t>(b * D + d)];
    int ix = x.id, iv = v.id;
    return make(
        "add_rowvec", {ix, iv}, std::move(out),
        [ix, iv, B, L, D](Graph& g, int self) {
            const auto& go = g.node(self).grad;
            if (auto* gx = grad_buf(g, ix))
                for (size_t i = 0; i < go.size(); ++i) (*gx)[i] += go[i];
            if (auto* gv = grad_buf(g, iv))
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t l = 0; l < L; ++l)
                        for (int64_t d = 0; d < D; ++d)
                            (*gv)[static_cast<size_t>(b * D + d)] +=
                                go[static_cast<size_t>(((b * L) + l) * D + d)];
        },
        [ix, iv, B, L, D](Graph& g, int self) {
            auto& t = g.node(self).tangent;
            const auto& txn = tan_buf(g, ix);
            const auto& tvn = tan_buf(g, iv);
            for (int64_t b = 0; b < B; ++b)
                for (int64_t l = 0; l < L; ++l)
                    for (int64_t d = 0; d < D; ++d)
                        t[static_cast<size_t>(((b * L) + l) * D + d)] =
                            txn[static_cast<size_t>(((b * L) + l) * D + d)] +
                            tvn[static_cast<size_t>(b * D + d)];
        });
}

// ---------------------------------------------------------------------------
// neural-net blocks
// ---------------------------------------------------------------------------

namespace {

// y[r,o] += x[r,i] * w[i,o]; w row-contiguous in o so the inner loop streams.
void matmul_acc(const double* x, const double* w, double* y, int64_t rows, int64_t I, int64_t O) {
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = x + r * I;
        double* yr = y + r * O;
        for (int64_t i = 0; i < I; ++i) {
            double xv = xr[i];
            if (xv == 0.0) continue;
            const double* wr = w + i * O;
            for (int64_t o = 0; o < O; ++o) yr[o] += xv * wr[o];
        }
    }
}

} // namespace

Var Graph::linear(Var x, Var w, std::optional<Var> b) {
    const Tensor& tx = value(x);
    const Tensor& tw = value(w);
    check(tw.rank() == 2, ErrorKind::shape, "linear: weight must be [I,O]");
    int64_t I = tw.dim(0), O = tw.dim(1);
    check(tx.shape.back() == I, ErrorKind::shape,
          "linear: input feature dim " + std::to_string(tx.shape.back()) + " != weight in dim " +
              std::to_string(I));
    int64_t rows = tx.numel() / I;
    std::vector<int64_t> oshape = tx.shape;
    oshape.back() = O;
    Tensor out(oshape);
    matmul_acc(tx.data.data(), tw.data.data(), out.data.data(), rows, I, O);
    std::vector<int> ids{x.id, w.id};
    if (b) {
        const Tensor& tb = value(*b);
        check(tb.rank() == 1 && tb.dim(0) == O, ErrorKind::shape, "linear: bias must be [O]");
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t o = 0; o < O; ++o)
                out.data[static_cast<size_t>(r * O + o)] += tb.data[static_cast<size_t>(o)];
        ids.push_back(b->id);
    }
    int ix = x.id, iw = w.id;
    int ib = b ? b->id : -1;
    return make(
        "linear", ids, std::move(out),
        [ix, iw, ib, rows, I, O](Graph& g, int self) {
            const auto& go = g.node(self).grad;
            const auto& vx = g.node(ix).value.data;
            const auto& vw = g.node(iw).value.data;
            if (auto* gx = grad_buf(g, ix)) {
                // gx[r,i] = sum_o go[r,o] * w[i,o]
                for (int64_t r = 0; r < rows; ++r) {
                    const double* gr = go.data() + r * O;
                    double* gxr = gx->data() + r * I;
                    for (int64_t i = 0; i < I; ++i) {
                        const double* wr = vw.data() + i * O;
                        double acc = 0.0;
                        for (int64_t o = 0; o < O; ++o) acc += gr[o] * wr[o];
                        gxr[i] += acc;
                    }
                }
            }
            if (auto* gw = grad_buf(g, iw)) {
                // gw[i,o] = sum_r x[r,i] * go[r,o]
                for (int64_t r = 0; r < rows; ++r) {
                    const double* xr = vx.data() + r * I;
                    const double* gr = go.data() + r * O;
                    for (int64_t i = 0; i < I; ++i) {
                        double xv = xr[i];
                        if (xv == 0.0) continue;
                        double* gwr = gw->data() + i * O;
                        for (int64_t o = 0; o < O; ++o) gwr[o] += xv * gr[o];
                    }
                }
            }
            if (ib >= 0)
                if (auto* gb = grad_buf(g, ib))
                    for (int64_t r = 0; r < rows; ++r)
                        for (int64_t o = 0; o < O; ++o)
                            (*gb)[static_cast<size_t>(o)] += go[static_cast<size_t>(r * O + o)];
        },
        [ix, iw, ib, rows, I, O](Graph& g, int self) {
            auto& t = g.node(self).tangent;
            const auto& vx = g.node(ix).value.data;
            const auto& vw = g.node(iw).value.data;
            matmul_acc(tan_buf(g, ix).data(), vw.data(), t.data(), rows, I, O);
            matmul_acc(vx.data(), tan_buf(g, iw).data(), t.data(), rows, I, O);
            if (ib >= 0) {
                const auto& tb = tan_buf(g, ib);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t o = 0; o < O; ++o)
                        t[static_cast<size_t>(r * O + o)] += tb[static_cast<size_t>(o)];
            }
        });
}

namespace {

struct ConvDims {
    int64_t B, Cin, L, Cout, K, Lout, stride, pad;
};

// forward accumulation shared by value and tangent passes
void conv1d_acc(const double* x, const double* w, double* y, const ConvDims& d) {
    for (int64_t b = 0; b < d.B; ++b)
        for (int64_t co = 0; co < d.Cout; ++co) {
            double* yo = y + (b * d.Cout + co) * d.Lout;
            for (int64_t ci = 0; ci < d.Cin; ++ci) {
                const double* xi = x + (b * d.Cin + ci) * d.L;
                const double* wk = w + (co * d.Cin + ci) * d.K;
                for (int64_t k = 0; k < d.K; ++k) {
                    double wv = wk[k];
                    if (wv == 0.0) continue;
                    // valid output range for this tap: 0 <= ol*stride + k - pad < L
                    int64_t lo = d.pad - k <= 0 ? 0 : (d.pad - k + d.stride - 1) / d.stride;
                    int64_t num = d.L - 1 + d.pad - k;
                    int64_t hi = num < 0 ? 0 : num / d.stride + 1;
                    if (hi > d.Lout) hi = d.Lout;
                    const double* xs = xi + lo * d.stride + k - d.pad;
                    for (int64_t ol = lo; ol < hi; ++ol)
                        yo[ol] += wv * xs[(ol - lo) * d.stride];
                }
            }
        }
}

} // namespace

Var Graph::conv1d(Var x, Var w, std::optional<Var> b, int64_t stride, int64_t padding) {
    const Tensor& tx = value(x);
    const Tensor& tw = value(w);
    check(tx.rank() == 3, ErrorKind::shape, "conv1d: input must be [B,C,L]");
    check(tw.rank() == 3, ErrorKind::shape, "conv1d: kernel must be [Cout,Cin,K]");
    check(stride >= 1, ErrorKind::config, "conv1d: stride must be positive");
    check(padding >= 0, ErrorKind::config, "conv1d: padding must be nonnegative");
    ConvDims d{tx.dim(0), tx.dim(1), tx.dim(2), tw.dim(0), tw.dim(2), 0, stride, padding};
    check(tw.dim(1) == d.Cin, ErrorKind::shape,
          "conv1d: kernel expects " + std::to_string(tw.dim(1)) + " input channels, input has " +
              std::to_string(d.Cin));
    check(d.K <= d.L + 2 * padding, ErrorKind::shape,
          "conv1d: kernel longer than padded input");
    d.Lout = (d.L + 2 * padding - d.K) / stride + 1;
    Tensor out(std::vector<int64_t>{d.B, d.Cout, d.Lout});
    conv1d_acc(tx.data.data(), tw.data.data(), out.data.data(), d);
    std::vector<int> ids{x.id, w.id};
    if (b) {
        const Tensor& tb = value(*b);
        check(tb.rank() == 1 && tb.dim(0) == d.Cout, ErrorKind::shape, "conv1d: bias must be [Cout]");
        for (int64_t bb = 0; bb < d.B; ++bb)
            for (int64_t co = 0; co < d.Cout; ++co)
                for (int64_t ol = 0; ol < d.Lout; ++ol)
                    out.data[static_cast<size_t>((bb * d.Cout + co) * d.Lout + ol)] +=
                        tb.data[static_cast<size_t>(co)];
        ids.push_back(b->id);
    }
    int ix = x.id, iw = w.id;
    int ib = b ? b->id : -1;
    return make(
        "conv1d", ids, std::move(out),
        [ix, iw, ib, d](Graph& g, int self) {
            const auto& go = g.node(self).grad;
            const auto& vx = g.node(ix).value.data;
            const auto& vw = g.node(iw).value.data;
            auto* gx = grad_buf(g, ix);
            auto* gw = grad_buf(g, iw);
            for (int64_t b2 = 0; b2 < d.B; ++b2)
                for (int64_t co = 0; co < d.Cout; ++co) {
                    const double* gobase = go.data() + (b2 * d.Cout + co) * d.Lout;
                    for (int64_t ci = 0; ci < d.Cin; ++ci) {
                        const double* xi = vx.data() + (b2 * d.Cin + ci) * d.L;
                        const double* wk = vw.data() + (co * d.Cin + ci) * d.K;
                        double* gxi = gx ? gx->data() + (b2 * d.Cin + ci) * d.L : nullptr;
                        double* gwk = gw ? gw->data() + (co * d.Cin + ci) * d.K : nullptr;
                        for (int64_t k = 0; k < d.K; ++k) {
                            int64_t lo = d.pad - k <= 0 ? 0 : (d.pad - k + d.stride - 1) / d.stride;
                            int64_t num = d.L - 1 + d.pad - k;
                            int64_t hi = num < 0 ? 0 : num / d.stride + 1;
                            if (hi > d.Lout) hi = d.Lout;
                            int64_t xoff = lo * d.stride + k - d.pad;
                            if (gxi) {
                                double wv = wk[k];
                                for (int64_t ol = lo; ol < hi; ++ol)
                                    gxi[xoff + (ol - lo) * d.stride] += wv * gobase[ol];
                            }
                            if (gwk) {
                                double acc = 0.0;
                                for (int64_t ol = lo; ol < hi; ++ol)
                                    acc += xi[xoff + (ol - lo) * d.stride] * gobase[ol];
                                gwk[k] += acc;
                            }
                        }
                    }
                    if (ib >= 0)
                        if (auto* gb = grad_buf(g, ib)) {
                            double acc = 0.0;
                            for (int64_t ol = 0; ol < d.Lout; ++ol) acc += gobase[ol];
                            (*gb)[static_cast<size_t>(co)] += acc;
                        }
                }
        },
        [ix, iw, ib, d](Graph& g, int self) {
            auto& t = g.node(self).tangent;
            const auto& vx = g.node(ix).value.data;
            const auto& vw = g.node(iw).value.data;
            conv1d_acc(tan_buf(g, ix).data(), vw.data(), t.data(), d);
            conv1d_acc(vx.data(), tan_buf(g, iw).data(), t.data(), d);
            if (ib >= 0) {
                const auto& tb = tan_buf(g, ib);
                for (int64_t b2 = 0; b2 < d.B; ++b2)
                    for (int64_t co = 0; co < d.Cout; ++co)
                        for (int64_t ol = 0; ol < d.Lout; ++ol)
                            t[static_cast<size_t>((b2 * d.Cout + co) * d.Lout + ol)] +=
                                tb[static_cast<size_t>(co)];
            }
        });
}

namespace {

struct TConvDims {
    int64_t B, Cin, L, Cout, K, Lout, stride, pad;
};

void tconv1d_acc(const double* x, const double* w, double* y, const TConvDims& d) {
    for (int64_t b = 0; b < d.B; ++b)
        for (int64_t ci = 0; ci < d.Cin; ++ci) {
            const double* xi = x + (b * d.Cin + ci) * d.L;
            for (int64_t co = 0; co < d.Cout; ++co) {
                const double* wk = w + (ci * d.Cout + co) * d.K;
                double* yo = y + (b * d.Cout + co) * d.Lout;
                for (int64_t il = 0; il < d.L; ++il) {
                    double xv = xi[il];
                    if (xv == 0.0) continue;
                    int64_t base = il * d.stride - d.pad;
                    int64_t k0 = base < 0 ? -base : 0;
                    int64_t k1 = d.K;
                    if (base + k1 > d.Lout) k1 = d.Lout - base;
                    for (int64_t k = k0; k < k1; ++k) yo[base + k] += xv * wk[k];
                }
            }
        }
}

} // namespace

Var Graph::conv_transpose1d(Var x, Var w, std::optional<Var> b, int64_t stride, int64_t padding) {
    const Tensor& tx = value(x);
    const Tensor& tw = value(w);
    check(tx.rank() == 3, ErrorKind::shape, "conv_transpose1d: input must be [B,C,L]");
    check(tw.rank() == 3, ErrorKind::shape, "conv_transpose1d: kernel must be [Cin,Cout,K]");
    check(stride >= 1, ErrorKind::config, "conv_transpose1d: stride must be positive");
    TConvDims d{tx.dim(0), tx.dim(1), tx.dim(2), tw.dim(1), tw.dim(2), 0, stride, padding};
    check(tw.dim(0) == d.Cin, ErrorKind::shape,
          "conv_transpose1d: kernel expects " + std::to_string(tw.dim(0)) +
              " input channels, input has " + std::to_string(d.Cin));
    d.Lout = (d.L - 1) * stride + d.K - 2 * padding;
    check(d.Lout >= 1, ErrorKind::shape, "conv_transpose1d: empty output");
    Tensor out(std::vector<int64_t>{d.B, d.Cout, d.Lout});
    tconv1d_acc(tx.data.data(), tw.data.data(), out.data.data(), d);
    std::vector<int> ids{x.id, w.id};
    if (b) {
        const Tensor& tb = value(*b);
        check(tb.rank() == 1 && tb.dim(0) == d.Cout, ErrorKind::shape,
              "conv_transpose1d: bias must be [Cout]");
        for (int64_t bb = 0; bb < d.B; ++bb)
            for (int64_t co = 0; co < d.Cout; ++co)
                for (int64_t ol = 0; ol < d.Lout; ++ol)
                    out.data[static_cast<size_t>((bb * d.Cout + co) * d.Lout + ol)] +=
                        tb.data[static_cast<size_t>(co)];
        ids.push_back(b->id);
    }
    int ix = x.id, iw = w.id;
    int ib = b ? b->id : -1;
    return make(
        "conv_transpose1d", ids, std::move(out),
        [ix, iw, ib, d](Graph& g, int self) {
            const auto& go = g.node(self).grad;
            const auto& vx = g.node(ix).value.data;
            const auto& vw = g.node(iw).value.data;
            auto* gx = grad_buf(g, ix);
            auto* gw = grad_buf(g, iw);
            for (int64_t b2 = 0; b2 < d.B; ++b2)
                for (int64_t ci = 0; ci < d.Cin; ++ci) {
                    const double* xi = vx.data() + (b2 * d.Cin + ci) * d.L;
                    double* gxi = gx ? gx->data() + (b2 * d.Cin + ci) * d.L : nullptr;
                    for (int64_t co = 0; co < d.Cout; ++co) {
                        const double* wk = vw.data() + (ci * d.Cout + co) * d.K;
                        double* gwk = gw ? gw->data() + (ci * d.Cout + co) * d.K : nullptr;
                        const double* gob = go.data() + (b2 * d.Cout + co) * d.Lout;
                        for (int64_t il = 0; il < d.L; ++il) {
                            int64_t base = il * d.stride - d.pad;
                            int64_t k0 = base < 0 ? -base : 0;
                            int64_t k1 = d.K;
                            if (base + k1 > d.Lout) k1 = d.Lout - base;
                            if (gxi) {
                                double acc = 0.0;
                                for (int64_t k = k0; k < k1; ++k) acc += wk[k] * gob[base + k];
                                gxi[il] += acc;
                            }
                            if (gwk) {
                                double xv = xi[il];
                                for (int64_t k = k0; k < k1; ++k) gwk[k] += xv * gob[base + k];
                            }
                        }
                    }
                }
            if (ib >= 0)
                if (auto* gb = grad_buf(g, ib))
                    for (int64_t b2 = 0; b2 < d.B; ++b2)
                        for (int64_t co = 0; co < d.Cout; ++co)
                            for (int64_t ol = 0; ol < d.Lout; ++ol)
                                (*gb)[static_cast<size_t>(co)] +=
                                    go[static_cast<size_t>((b2 * d.Cout + co) * d.Lout + ol)];
        },
        [ix, iw, ib, d](Graph& g, int self) {
            auto& t = g.node(self).tangent;
            const auto& vx = g.node(ix).value.data;
            const auto& vw = g.node(iw).value.data;
            tconv1d_acc(tan_buf(g, ix).data(), vw.data(), t.data(), d);
            tconv1d_acc(vx.data(), tan_buf(g, iw).data(), t.data(), d);
            if (ib >= 0) {
                const auto& tb = tan_buf(g, ib);
                for (int64_t b2 = 0; b2 < d.B; ++b2)
                    for (int64_t co = 0; co < d.Cout; ++co)
                        for (int64_t ol = 0; ol < d.Lout; ++ol)
                            t[static_cast<size_t>((b2 * d.Cout + co) * d.Lout + ol)] +=
                                tb[static_cast<size_t>(co)];
            }
        });
}

Var Graph::rms_norm(Var x, Var gain, double eps) {
    const Tensor& tx = value(x);
    const Tensor& tg = value(gain);
    int64_t D = tx.shape.back();
    check(tg.rank() == 1 && tg.dim(0) == D, ErrorKind::shape, "rms_norm: gain must be [D]");
    int64_t rows = tx.numel() / D;
    auto inv_r = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    Tensor out;
    out.shape = tx.shape;
    out.data.resize(tx.data.size());
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = tx.data.data() + r * D;
        double ss = 0.0;
        for (int64_t d = 0; d < D; ++d) ss += xr[d] * xr[d];
        double ir = 1.0 / std::sqrt(ss / static_cast<double>(D) + eps);
        (*inv_r)[static_cast<size_t>(r)] = ir;
        double* yr = out.data.data() + r * D;
        for (int64_t d = 0; d < D; ++d) yr[d] = xr[d] * ir * tg.data[static_cast<size_t>(d)];
    }
    int ix = x.id, ig = gain.id;
    return make(
        "rms_norm", {ix, ig}, std::move(out),
        [ix, ig, rows, D, inv_r](Graph& g, int self) {
            const auto& go = g.node(self).grad;
            const auto& vx = g.node(ix).value.data;
            const auto& vg = g.node(ig).value.data;
            auto* gx = grad_buf(g, ix);
            auto* gg = grad_buf(g, ig);
            for (int64_t r = 0; r < rows; ++r) {
                const double* xr = vx.data() + r * D;
                const double* gr = go.data() + r * D;
                double ir = (*inv_r)[static_cast<size_t>(r)];
                if (gx) {
                    double dot = 0.0;
                    for (int64_t d = 0; d < D; ++d)
                        dot += gr[d] * vg[static_cast<size_t>(d)] * xr[d];
                    double* gxr = gx->data() + r * D;
                    double c = dot * ir * ir * ir / static_cast<double>(D);
                    for (int64_t d = 0; d < D; ++d)
                        gxr[d] += gr[d] * vg[static_cast<size_t>(d)] * ir - xr[d] * c;
                }
                if (gg)
                    for (int64_t d = 0; d < D; ++d)
                        (*gg)[static_cast<size_t>(d)] += gr[d] * xr[d] * ir;
            }
        },
        [ix, ig, rows, D, inv_r](Graph& g, int self) {
            auto& t = g.node(self).tangent;
            const auto& vx = g.node(ix).value.data;
            const auto& vg = g.node(ig).value.data;
            const auto& txn = tan_buf(g, ix);
            const auto& tgn = tan_buf(g, ig);
            for (int64_t r = 0; r < rows; ++r) {
                const double* xr = vx.data() + r * D;
                const double* txr = txn.data() + r * D;
                double ir = (*inv_r)[static_cast<size_t>(r)];
                double dot = 0.0;
                for (int64_t d = 0; d < D; ++d) dot += xr[d] * txr[d];
                // d(1/r)/dx direction = -ir^3 * mean(x . tx)
                double c = dot * ir * ir * ir / static_cast<double>(D);
                double* tr = t.data() + r * D;
                for (int64_t d = 0; d < D; ++d)
                    tr[d] = vg[static_cast<size_t>(d)] * (txr[d] * ir - xr[d] * c) +
                            tgn[static_cast<size_t>(d)] * xr[d] * ir;
            }
        });
}

Var Graph::rope(Var x, int64_t heads, double theta) {
    const Tensor& tx = value(x);
    check(tx.rank() == 3, ErrorKind::shape, "rope expects [B,L,D]");
    int64_t B = tx.dim(0), L = tx.dim(1), D = tx.dim(2);
    check(heads >= 1 && D % heads == 0, ErrorKind::config, "rope: D must divide by heads");
    int64_t hd = D / heads;
    check(hd % 2 == 0, ErrorKind::config, "rope: head dim must be even");
    int64_t half = hd / 2;
    // cos/sin tables per (position, pair)
    auto cs = std::make_shared<std::vector<double>>(static_cast<size_t>(L * half * 2));
    for (int64_t l = 0; l < L; ++l)
        for (int64_t i = 0; i < half; ++i) {
            double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
            double ang = static_cast<double>(l) * freq;
            (*cs)[static_cast<size_t>((l * half + i) * 2)] = std::cos(ang);
            (*cs)[static_cast<size_t>((l * half + i) * 2 + 1)] = std::sin(ang);
        }
    auto rotate = [B, L, D, heads, half, cs](const double* src, double* dst, bool inverse) {
        for (int64_t b = 0; b < B; ++b)
            for (int64_t l = 0; l < L; ++l)
                for (int64_t h = 0; h < heads; ++h) {
                    const double* s = src + ((b * L + l) * D) + h * half * 2;
                    double* o = dst + ((b * L + l) * D) + h * half * 2;
                    for (int64_t i = 0; i < half; ++i) {
                        double c = (*cs)[static_cast<size_t>((l * half + i) * 2)];
                        double sn = (*cs)[static_cast<size_t>((l * half + i) * 2 + 1)];
                        if (inverse) sn = -sn;
                        double a = s[2 * i], bb = s[2 * i + 1];
                        o[2 * i] = a * c - bb * sn;
                        o[2 * i + 1] = a * sn + bb * c;
                    }
                }
    };
    Tensor out;
    out.shape = tx.shape;
    out.data.resize(tx.data.size());
    rotate(tx.data.data(), out.data.data(), false);
    int ix = x.id;
    return make(
        "rope", {ix}, std::move(out),
        [ix, rotate](Graph& g, int self) {
            const auto& go = g.node(self).grad;
            if (auto* gx = grad_buf(g, ix)) {
                std::vector<double> tmp(go.size());
                rotate(go.data(), tmp.data(), true);
                for (size_t i = 0; i < tmp.size(); ++i) (*gx)[i] += tmp[i];
            }
        },
        [ix, rotate](Graph& g, int self) {
            rotate(tan_buf(g, ix).data(), g.node(self).tangent.data(), false);
        });
}

Var Graph::attention(Var q, Var k, Var v, int64_t heads) {
    const Tensor& tq = value(q);
    const Tensor& tk = value(k);
    const Tensor& tv = value(v);
    check(tq.rank() == 3 && tk.rank() == 3 && tv.rank() == 3, ErrorKind::shape,
          "attention expects rank-3 inputs");
    int64_t B = tq.dim(0), L = tq.dim(1), D = tq.dim(2);
    int64_t M = tk.dim(1);
    check(tk.dim(0) == B && tv.dim(0) == B, ErrorKind::shape, "attention: batch mismatch");
    check(tk.dim(2) == D && tv.dim(2) == D, ErrorKind::shape, "attention: feature dim mismatch");
    check(tv.dim(1) == M, ErrorKind::shape, "attention: key/value length mismatch");
    check(heads >= 1 && D % heads == 0, ErrorKind::config,
          "attention: feature dim " + std::to_string(D) + " not divisible by " +
              std::to_string(heads) + " heads");
    int64_t hd = D / heads;
    double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    // softmax probabilities saved for backward/tangent: [B, heads, L, M]
    auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(B * heads * L * M));
    Tensor out(std::vector<int64_t>{B, L, D});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < heads; ++h) {
            for (int64_t l = 0; l < L; ++l) {
                const double* qr = tq.data.data() + (b * L + l) * D + h * hd;
                double* pr = probs->data() + ((b * heads + h) * L + l) * M;
                double mx = -1e300;
                for (int64_t m = 0; m < M; ++m) {
                    const double* kr = tk.data.data() + (b * M + m) * D + h * hd;
                    double s = 0.0;
                    for (int64_t d2 = 0; d2 < hd; ++d2) s += qr[d2] * kr[d2];
                    s *= inv_sqrt;
                    pr[m] = s;
                    if (s > mx) mx = s;
                }
                double denom = 0.0;
                for (int64_t m = 0; m < M; ++m) {
                    pr[m] = std::exp(pr[m] - mx);
                    denom += pr[m];
                }
                double* orow = out.data.data() + (b * L + l) * D + h * hd;
                for (int64_t m = 0; m < M; ++m) {
                    pr[m] /= denom;
                    const double* vr = tv.data.data() + (b * M + m) * D + h * hd;
                    for (int64_t d2 = 0; d2 < hd; ++d2) orow[d2] += pr[m] * vr[d2];
                }
            }
        }
    int iq = q.id, ik = k.id, iv = v.id;
    return make(
        "attention", {iq, ik, iv}, std::move(out),
        [iq, ik, iv, B, L, M, D, heads, hd, inv_sqrt, probs](Graph& g, int self) {
            const auto& go = g.node(self).grad;
            const auto& vq = g.node(iq).value.data;
            const auto& vk = g.node(ik).value.data;
            const auto& vv = g.node(iv).value.data;
            auto* gq = grad_buf(g, iq);
            auto* gk = grad_buf(g, ik);
            auto* gv = grad_buf(g, iv);
            std::vector<double> gp(static_cast<size_t>(M));
            std::vector<double> gs(static_cast<size_t>(M));
            for (int64_t b = 0; b < B; ++b)
                for (int64_t h = 0; h < heads; ++h)
                    for (int64_t l = 0; l < L; ++l) {
                        const double* pr = probs->data() + ((b * heads + h) * L + l) * M;
                        const double* gor = go.data() + (b * L + l) * D + h * hd;
                        // gV and gP
                        double dot = 0.0;
                        for (int64_t m = 0; m < M; ++m) {
                            const double* vr = vv.data() + (b * M + m) * D + h * hd;
                            double acc = 0.0;
                            for (int64_t d2 = 0; d2 < hd; ++d2) acc += gor[d2] * vr[d2];
                            gp[static_cast<size_t>(m)] = acc;
                            dot += acc * pr[m];
                            if (gv) {
                                double* gvr = gv->data() + (b * M + m) * D + h * hd;
                                for (int64_t d2 = 0; d2 < hd; ++d2)
                                    gvr[d2] += pr[m] * gor[d2];
                            }
                        }
                        // softmax backward
                        for (int64_t m = 0; m < M; ++m)
                            gs[static_cast<size_t>(m)] =
                                pr[m] * (gp[static_cast<size_t>(m)] - dot) * inv_sqrt;
                        const double* qr = vq.data() + (b * L + l) * D + h * hd;
                        for (int64_t m = 0; m < M; ++m) {
                            double gsm = gs[static_cast<size_t>(m)];
                            if (gsm == 0.0) continue;
                            const double* kr = vk.data() + (b * M + m) * D + h * hd;
                            if (gq) {
                                double* gqr = gq->data() + (b * L + l) * D + h * hd;
                                for (int64_t d2 = 0; d2 < hd; ++d2) gqr[d2] += gsm * kr[d2];
                            }
                            if (gk) {
                                double* gkr = gk->data() + (b * M + m) * D + h * hd;
                                for (int64_t d2 = 0; d2 < hd; ++d2) gkr[d2] += gsm * qr[d2];
                            }
                        }
                    }
        },
        [iq, ik, iv, B, L, M, D, heads, hd, inv_sqrt, probs](Graph& g, int self) {
            auto& t = g.node(self).tangent;
            const auto& vq = g.node(iq).value.data;
            const auto& vk = g.node(ik).value.data;
            const auto& vv = g.node(iv).value.data;
            const auto& tq = tan_buf(g, iq);
            const auto& tk = tan_buf(g, ik);
            const auto& tv = tan_buf(g, iv);
            std::vector<double> ts(static_cast<size_t>(M));
            std::vector<double> tp(static_cast<size_t>(M));
            for (int64_t b = 0; b < B; ++b)
                for (int64_t h = 0; h < heads; ++h)
                    for (int64_t l = 0; l < L; ++l) {
                        const double* pr = probs->data() + ((b * heads + h) * L + l) * M;
                        const double* qr = vq.data() + (b * L + l) * D + h * hd;
                        const double* tqr = tq.data() + (b * L + l) * D + h * hd;
                        double wsum = 0.0;
                        for (int64_t m = 0; m < M; ++m) {
                            const double* kr = vk.data() + (b * M + m) * D + h * hd;
                            const double* tkr = tk.data() + (b * M + m) * D + h * hd;
                            double acc = 0.0;
                            for (int64_t d2 = 0; d2 < hd; ++d2)
                                acc += tqr[d2] * kr[d2] + qr[d2] * tkr[d2];
                            ts[static_cast<size_t>(m)] = acc * inv_sqrt;
                            wsum += pr[m] * ts[static_cast<size_t>(m)];
                        }
                        for (int64_t m = 0; m < M; ++m)
                            tp[static_cast<size_t>(m)] =
                                pr[m] * (ts[static_cast<size_t>(m)] - wsum);
                        double* tr = t.data() + (b * L + l) * D + h * hd;
                        for (int64_t m = 0; m < M; ++m) {
                            const double* vr = vv.data() + (b * M + m) * D + h * hd;
                            const double* tvr = tv.data() + (b * M + m) * D + h * hd;
                            for (int64_t d2 = 0; d2 < hd; ++d2)
                                tr[d2] += tp[static_cast<size_t>(m)] * vr[d2] + pr[m] * tvr[d2];
                        }
                    }
        });
}

Var Graph::select_row(Var table, int64_t row) {
    const Tensor& tt = value(table);
    check(tt.rank() == 2, ErrorKind::shape, "select_row expects [N,D]");
    int64_t N = tt.dim(0), D = tt.dim(1);
    check(row >= 0 && row < N, ErrorKind::domain,
          "select_row: row " + std::to_string(row) + " out of range [0," + std::to_string(N) + ")");
    Tensor out(std::vector<int64_t>{D});
    std::memcpy(out.data.data(), tt.data.data() + row * D, static_cast<size_t>(D) * sizeof(double));
    int it = table.id;
    return make(
        "select_row", {it}, std::move(out),
        [it, row, D](Graph& g, int self) {
            const auto& go = g.node(self).grad;
            if (auto* gt = grad_buf(g, it))
                for (int64_t d = 0; d < D; ++d)
                    (*gt)[static_cast<size_t>(row * D + d)] += go[static_cast<size_t>(d)];
        },
        [it, row, D](Graph& g, int self) {
            auto& t = g.node(self).tangent;
            const auto& tt2 = tan_buf(g, it);
            for (int64_t d = 0; d < D; ++d)
                t[static_cast<size_t>(d)] = tt2[static_cast<size_t>(row * D + d)];
        });
}

Var Graph::sinusoid_embed(Var t, int64_t dim, double scale) {
    const Tensor& tt = value(t);
    check(tt.rank() == 1, ErrorKind::shape, "sinusoid_embed expects a rank-1 input");
    check(dim >= 2 && dim % 2 == 0, ErrorKind::config, "sinusoid_embed: dim must be even");
    int64_t B = tt.dim(0), half = dim / 2;
    std::vector<double> freqs(static_cast<size_t>(half));
    for (int64_t i = 0; i < half; ++i)
        freqs[static_cast<size_t>(i)] =
            std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
    Tensor out(std::vector<int64_t>{B, dim});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < half; ++i) {
            double a = scale * tt.data[static_cast<size_t>(b)] * freqs[static_cast<size_t>(i)];
            out.data[static_cast<size_t>(b * dim + i)] = std::sin(a);
            out.data[static_cast<size_t>(b * dim + half + i)] = std::cos(a);
        }
    int it = t.id;
    return make(
        "sinusoid_embed", {it}, std::move(out),
        [it, B, dim, half, scale, freqs](Graph& g, int self) {
            const auto& go = g.node(self).grad;
            const auto& vt = g.node(it).value.data;
            if (auto* gt = grad_buf(g, it))
                for (int64_t b = 0; b < B; ++b) {
                    double acc = 0.0;
                    for (int64_t i = 0; i < half; ++i) {
                        double w = scale * freqs[static_cast<size_t>(i)];
                        double a = w * vt[static_cast<size_t>(b)];
                        acc += go[static_cast<size_t>(b * dim + i)] * w * std::cos(a);
                        acc -= go[static_cast<size_t>(b * dim + half + i)] * w * std::sin(a);
                    }
                    (*gt)[static_cast<size_t>(b)] += acc;
                }
        },
        [it, B, dim, half, scale, freqs](Graph& g, int self) {
            auto& t2 = g.node(self).tangent;
            const auto& vt = g.node(it).value.data;
            const auto& ttn = tan_buf(g, it);
            for (int64_t b = 0; b < B; ++b) {
                double tb = ttn[static_cast<size_t>(b)];
                for (int64_t i = 0; i < half; ++i) {
                    double w = scale * freqs[static_cast<size_t>(i)];
                    double a = w * vt[static_cast<size_t>(b)];
                    t2[static_cast<size_t>(b * dim + i)] = tb * w * std::cos(a);
                    t2[static_cast<size_t>(b * dim + half + i)] = -tb * w * std::sin(a);
                }
            }
        });
}

Var Graph::stop_gradient(Var x) {
    const Tensor& tx = value(x);
    Tensor out;
    out.shape = tx.shape;
    out.data = tx.data;
    Node n;
    n.op = "stop_gradient";
    n.inputs = {x.id};
    n.value = std::move(out);
    n.requires_grad = false; // blocks reverse flow entirely
    n.tangent_fn = [](Graph& g, int self) {
        // zero tangent regardless of input seeds
        auto& t = g.node(self).tangent;
        std::fill(t.begin(), t.end(), 0.0);
    };
    return Var{this, push(std::move(n))};
}

Var Graph::custom(const std::string& name, const std::vector<Var>& inputs, Tensor value,
                  CustomRule rule) {
    std::vector<int> ids;
    ids.reserve(inputs.size());
    for (const Var& v : inputs) ids.push_back(v.id);
    auto bwd = rule.backward;
    auto tan = rule.tangent;
    std::function<void(Graph&, int)> bfn;
    if (bwd)
        bfn = [ids, bwd](Graph& g, int self) {
            std::vector<const Tensor*> ins;
            std::vector<std::vector<double>*> gins;
            for (int i : ids) {
                ins.push_back(&g.node(i).value);
                gins.push_back(grad_buf(g, i));
            }
            bwd(g.node(self).value, g.node(self).grad, ins, gins);
        };
    std::function<void(Graph&, int)> tfn;
    if (tan)
        tfn = [ids, tan](Graph& g, int self) {
            std::vector<const Tensor*> ins;
            std::vector<const std::vector<double>*> tins;
            for (int i : ids) {
                ins.push_back(&g.node(i).value);
                tins.push_back(&g.node(i).tangent);
            }
            tan(g.node(self).value, ins, tins, g.node(self).tangent);
        };
    return make("custom:" + name, std::move(ids), std::move(value), std::move(bfn),
                std::move(tfn));
}

// ---------------------------------------------------------------------------
// jvp helper
// ---------------------------------------------------------------------------

std::pair<Tensor, Tensor> jvp(const std::function<Var(Graph&, Var)>& f, const Tensor& at,
                              const Tensor& direction) {
    check(direction.shape == at.shape, ErrorKind::shape,
          "jvp: direction shape must match input shape");
    Graph g;
    Var x = g.leaf(at);
    Var y = f(g, x);
    g.seed_tangent(x, direction);
    g.run_tangent();
    return {g.value(y), g.tangent(y)};
}

// ---------------------------------------------------------------------------
// parameter stores
// ---------------------------------------------------------------------------

Tensor& ParamStore::add(const std::string& name, Tensor init) {
    check(params.count(name) == 0, ErrorKind::config, "duplicate parameter name " + name);
    init.requires_grad = true;
    auto [it, ok] = params.emplace(name, std::move(init));
    (void)ok;
    return it->second;
}

Tensor& ParamStore::at(const std::string& name) {
    auto it = params.find(name);
    check(it != params.end(), ErrorKind::config, "unknown parameter " + name);
    return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
    auto it = params.find(name);
    check(it != params.end(), ErrorKind::config, "unknown parameter " + name);
    return it->second;
}

int64_t ParamStore::total_elements() const {
    int64_t n = 0;
    for (const auto& [k, v] : params) n += v.numel();
    return n;
}

Var BoundParams::at(const std::string& name) const {
    auto it = vars.find(name);
    check(it != vars.end(), ErrorKind::config, "unknown bound parameter " + name);
    return it->second;
}

BoundParams bind_params(Graph& g, const ParamStore& store, bool trainable) {
    BoundParams out;
    for (const auto& [name, tensor] : store.params) {
        if (trainable)
            out.vars.emplace(name, g.leaf(tensor));
        else
            out.vars.emplace(name, g.constant(tensor));
    }
    return out;
}

std::map<std::string, Tensor> collect_grads(Graph& g, const BoundParams& bound) {
    std::map<std::string, Tensor> out;
    for (const auto& [name, var] : bound.vars) out.emplace(name, g.grad(var));
    return out;
}

uint64_t param_fingerprint(const ParamStore& store) {
    uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* p, size_t n) {
        const unsigned char* c = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < n; ++i) {
            h ^= c[i];
            h *= 1099511628211ULL;
        }
    };
    for (const auto& [name, t] : store.params) {
        mix(name.data(), name.size());
        for (int64_t d : t.shape) mix(&d, sizeof(d));
        mix(t.data.data(), t.data.size() * sizeof(double));
    }
    return h;
}

} // namespace latgen
