#include "diffrate/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace diffrate {

namespace {
std::atomic<uint64_t> g_next_id{1};

int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}
}  // namespace

namespace detail {

struct TensorNode {
    std::vector<int64_t> shape;
    std::vector<double> val;
    std::vector<double> grad;
    bool requires_grad = false;  // leaf marker
    bool needs_grad = false;
    uint64_t id = 0;
    std::vector<std::shared_ptr<TensorNode>> inputs;
    std::function<void(TensorNode&)> backprop;
};

}  // namespace detail


namespace detail {

void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void require(bool ok, const std::string& msg) {
    if (!ok) fail(msg);
}

std::string shape_str(const std::vector<int64_t>& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

void check_finite(const Tensor& t, const char* op) {
    const auto& d = t.data();
    for (size_t i = 0; i < d.size(); ++i) {
        if (!std::isfinite(d[i])) {
            std::ostringstream os;
            os << op << ": non-finite input value " << d[i] << " at flat index " << i;
            fail(os.str());
        }
    }
}

size_t OpCtx::input_count() const { return nodes.size(); }

const std::vector<double>& OpCtx::input_val(size_t i) const { return nodes[i]->val; }

std::vector<double>* OpCtx::input_grad(size_t i) {
    detail::TensorNode* n = nodes[i];
    if (!n->needs_grad) return nullptr;
    if (n->grad.size() != n->val.size()) n->grad.assign(n->val.size(), 0.0);
    return &n->grad;
}

Tensor make_op(std::vector<int64_t> shape, std::vector<double> val,
               const std::vector<Tensor>& inputs, BackwardFn bw) {
    require(shape_numel(shape) == static_cast<int64_t>(val.size()),
            "make_op: value count does not match shape " + shape_str(shape));
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->val = std::move(val);
    node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    bool needs = false;
    for (const Tensor& in : inputs) {
        if (in.needs_grad()) {
            needs = true;
            break;
        }
    }
    if (needs && bw) {
        node->needs_grad = true;
        node->inputs.reserve(inputs.size());
        for (const Tensor& in : inputs) node->inputs.push_back(in.n_);
        node->backprop = [fn = std::move(bw)](TensorNode& self) {
            OpCtx ctx{self.grad, self.val, {}};
            ctx.nodes.reserve(self.inputs.size());
            for (auto& in : self.inputs) ctx.nodes.push_back(in.get());
            fn(ctx);
        };
    }
    return Tensor(std::move(node));
}

}  // namespace detail

using detail::check_finite;
using detail::fail;
using detail::make_op;
using detail::require;
using detail::shape_str;

// ---- Tensor basics ---------------------------------------------------------

Tensor::Tensor(std::vector<int64_t> shape, double fill, bool requires_grad)
    : Tensor(std::move(shape), std::vector<double>(), requires_grad) {
    n_->val.assign(static_cast<size_t>(shape_numel(n_->shape)), fill);
}

Tensor::Tensor(std::vector<int64_t> shape, std::vector<double> data, bool requires_grad) {
    require(!shape.empty() && shape.size() <= 2, "Tensor: rank must be 1 or 2");
    for (int64_t d : shape) require(d >= 0, "Tensor: negative dimension");
    n_ = std::make_shared<detail::TensorNode>();
    n_->shape = std::move(shape);
    if (!data.empty()) {
        require(static_cast<int64_t>(data.size()) == shape_numel(n_->shape),
                "Tensor: data size does not match shape " + shape_str(n_->shape));
    }
    n_->val = std::move(data);
    if (n_->val.empty()) n_->val.assign(static_cast<size_t>(shape_numel(n_->shape)), 0.0);
    n_->requires_grad = requires_grad;
    n_->needs_grad = requires_grad;
    n_->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return Tensor({1}, std::vector<double>{v}, requires_grad);
}

const std::vector<int64_t>& Tensor::shape() const { return n_->shape; }

int64_t Tensor::size() const { return static_cast<int64_t>(n_->val.size()); }

int64_t Tensor::rows() const { return n_->shape[0]; }

int64_t Tensor::cols() const { return n_->shape.size() == 2 ? n_->shape[1] : 1; }

bool Tensor::same_shape(const Tensor& other) const { return n_->shape == other.n_->shape; }

double Tensor::value() const {
    require(size() == 1, "Tensor::value: tensor is not scalar-shaped");
    return n_->val[0];
}

double Tensor::at(int64_t i) const { return n_->val[static_cast<size_t>(i)]; }

double Tensor::at(int64_t r, int64_t c) const {
    return n_->val[static_cast<size_t>(r * cols() + c)];
}

const std::vector<double>& Tensor::data() const { return n_->val; }

std::vector<double>& Tensor::data_mut() {
    require(!n_->backprop, "Tensor::data_mut: only leaf tensors are mutable");
    return n_->val;
}

bool Tensor::requires_grad() const { return n_->requires_grad; }

bool Tensor::needs_grad() const { return n_ && n_->needs_grad; }

bool Tensor::has_grad() const { return n_ && n_->grad.size() == n_->val.size(); }

const std::vector<double>& Tensor::grad() const {
    require(has_grad(), "Tensor::grad: no gradient present (run backward first)");
    return n_->grad;
}

Tensor Tensor::grad_tensor() const { return Tensor(n_->shape, grad()); }

void Tensor::zero_grad() { n_->grad.clear(); }

void Tensor::set_grad(std::vector<double> g) {
    require(!n_->backprop, "Tensor::set_grad: only leaf tensors accept gradients");
    require(g.size() == n_->val.size(), "Tensor::set_grad: gradient size mismatch");
    n_->grad = std::move(g);
}

uint64_t Tensor::id() const { return n_->id; }

// ---- backward --------------------------------------------------------------

namespace {

std::vector<detail::TensorNode*> reachable_sorted(detail::TensorNode* root) {
    std::vector<detail::TensorNode*> order;
    std::unordered_set<detail::TensorNode*> seen;
    std::vector<detail::TensorNode*> stack{root};
    seen.insert(root);
    while (!stack.empty()) {
        detail::TensorNode* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (auto& in : n->inputs) {
            detail::TensorNode* p = in.get();
            if (p->needs_grad && seen.insert(p).second) stack.push_back(p);
        }
    }
    std::sort(order.begin(), order.end(),
              [](const detail::TensorNode* a, const detail::TensorNode* b) { return a->id < b->id; });
    return order;
}

}  // namespace

void backward(const Tensor& root) {
    require(root.defined(), "backward: undefined tensor");
    require(root.size() == 1, "backward: root must be scalar-shaped, got " +
                                  shape_str(root.shape()));
    require(root.needs_grad(), "backward: root does not require gradients");
    detail::TensorNode* r = root.n_.get();
    auto order = reachable_sorted(r);
    for (detail::TensorNode* n : order) n->grad.assign(n->val.size(), 0.0);
    r->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backprop) (*it)->backprop(**it);
    }
}

GradientTape GradientTape::of(const Tensor& root) {
    require(root.defined(), "GradientTape: undefined tensor");
    GradientTape tape;
    if (!root.needs_grad()) return tape;
    auto order = reachable_sorted(root.n_.get());
    for (detail::TensorNode* n : order) {
        if (!n->backprop) continue;
        Entry e;
        e.output_id = n->id;
        for (auto& in : n->inputs) e.input_ids.push_back(in->id);
        tape.entries.push_back(std::move(e));
    }
    return tape;
}

// ---- primitive helpers -----------------------------------------------------

namespace {

void binary_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require(a.defined() && b.defined(), std::string(op) + ": undefined input");
    require(a.same_shape(b), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                 " vs " + shape_str(b.shape()));
    check_finite(a, op);
    check_finite(b, op);
}

Tensor elementwise_unary(const Tensor& x, const char* op, double (*f)(double),
                         double (*df)(double)) {
    require(x.defined(), std::string(op) + ": undefined input");
    check_finite(x, op);
    std::vector<double> out(x.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = f(x.data()[i]);
    return make_op(x.shape(), std::move(out), {x}, [df](detail::OpCtx& ctx) {
        auto* gx = ctx.input_grad(0);
        if (!gx) return;
        const auto& xv = ctx.input_val(0);
        for (size_t i = 0; i < xv.size(); ++i) (*gx)[i] += ctx.out_grad[i] * df(xv[i]);
    });
}

}  // namespace

// ---- primitives ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.defined() && b.defined(), "matmul: undefined input");
    require(a.shape().size() == 2 && b.shape().size() == 2, "matmul: inputs must be rank-2");
    require(a.cols() == b.rows(), "matmul: inner dimensions differ, " + shape_str(a.shape()) +
                                      " * " + shape_str(b.shape()));
    check_finite(a, "matmul");
    check_finite(b, "matmul");
    const int64_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(static_cast<size_t>(m * n), 0.0);
    const double* av = a.data().data();
    const double* bv = b.data().data();
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t p = 0; p < k; ++p) {
            double aip = av[i * k + p];
            if (aip == 0.0) continue;
            const double* brow = bv + p * n;
            double* orow = out.data() + i * n;
            for (int64_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    }
    return make_op({m, n}, std::move(out), {a, b}, [m, k, n](detail::OpCtx& ctx) {
        const auto& g = ctx.out_grad;
        if (auto* ga = ctx.input_grad(0)) {
            const auto& bv = ctx.input_val(1);
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) {
                    double gij = g[i * n + j];
                    if (gij == 0.0) continue;
                    for (int64_t p = 0; p < k; ++p) (*ga)[i * k + p] += gij * bv[p * n + j];
                }
        }
        if (auto* gb = ctx.input_grad(1)) {
            const auto& av = ctx.input_val(0);
            for (int64_t i = 0; i < m; ++i)
                for (int64_t p = 0; p < k; ++p) {
                    double aip = av[i * k + p];
                    if (aip == 0.0) continue;
                    for (int64_t j = 0; j < n; ++j) (*gb)[p * n + j] += aip * g[i * n + j];
                }
        }
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    binary_same_shape(a, b, "add");
    std::vector<double> out(a.data());
    for (size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](detail::OpCtx& ctx) {
        if (auto* ga = ctx.input_grad(0))
            for (size_t i = 0; i < ga->size(); ++i) (*ga)[i] += ctx.out_grad[i];
        if (auto* gb = ctx.input_grad(1))
            for (size_t i = 0; i < gb->size(); ++i) (*gb)[i] += ctx.out_grad[i];
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    binary_same_shape(a, b, "sub");
    std::vector<double> out(a.data());
    for (size_t i = 0; i < out.size(); ++i) out[i] -= b.data()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](detail::OpCtx& ctx) {
        if (auto* ga = ctx.input_grad(0))
            for (size_t i = 0; i < ga->size(); ++i) (*ga)[i] += ctx.out_grad[i];
        if (auto* gb = ctx.input_grad(1))
            for (size_t i = 0; i < gb->size(); ++i) (*gb)[i] -= ctx.out_grad[i];
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    binary_same_shape(a, b, "mul");
    std::vector<double> out(a.data());
    for (size_t i = 0; i < out.size(); ++i) out[i] *= b.data()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](detail::OpCtx& ctx) {
        if (auto* ga = ctx.input_grad(0)) {
            const auto& bv = ctx.input_val(1);
            for (size_t i = 0; i < ga->size(); ++i) (*ga)[i] += ctx.out_grad[i] * bv[i];
        }
        if (auto* gb = ctx.input_grad(1)) {
            const auto& av = ctx.input_val(0);
            for (size_t i = 0; i < gb->size(); ++i) (*gb)[i] += ctx.out_grad[i] * av[i];
        }
    });
}

Tensor scale(const Tensor& a, double s) {
    require(a.defined(), "scale: undefined input");
    require(std::isfinite(s), "scale: non-finite scalar");
    check_finite(a, "scale");
    std::vector<double> out(a.data());
    for (double& v : out) v *= s;
    return make_op(a.shape(), std::move(out), {a}, [s](detail::OpCtx& ctx) {
        if (auto* ga = ctx.input_grad(0))
            for (size_t i = 0; i < ga->size(); ++i) (*ga)[i] += ctx.out_grad[i] * s;
    });
}

Tensor add_scalar(const Tensor& a, double s) {
    require(a.defined(), "add_scalar: undefined input");
    require(std::isfinite(s), "add_scalar: non-finite scalar");
    check_finite(a, "add_scalar");
    std::vector<double> out(a.data());
    for (double& v : out) v += s;
    return make_op(a.shape(), std::move(out), {a}, [](detail::OpCtx& ctx) {
        if (auto* ga = ctx.input_grad(0))
            for (size_t i = 0; i < ga->size(); ++i) (*ga)[i] += ctx.out_grad[i];
    });
}

Tensor add_rowwise(const Tensor& x, const Tensor& v) {
    require(x.defined() && v.defined(), "add_rowwise: undefined input");
    require(x.shape().size() == 2 && v.shape().size() == 1,
            "add_rowwise: expects rank-2 plus rank-1");
    require(x.cols() == v.size(), "add_rowwise: row width " + std::to_string(x.cols()) +
                                      " vs vector length " + std::to_string(v.size()));
    check_finite(x, "add_rowwise");
    check_finite(v, "add_rowwise");
    const int64_t m = x.rows(), n = x.cols();
    std::vector<double> out(x.data());
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out[i * n + j] += v.data()[j];
    return make_op(x.shape(), std::move(out), {x, v}, [m, n](detail::OpCtx& ctx) {
        if (auto* gx = ctx.input_grad(0))
            for (size_t i = 0; i < gx->size(); ++i) (*gx)[i] += ctx.out_grad[i];
        if (auto* gv = ctx.input_grad(1)) {
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) (*gv)[j] += ctx.out_grad[i * n + j];
        }
    });
}

Tensor transpose(const Tensor& a) {
    require(a.defined(), "transpose: undefined input");
    require(a.shape().size() == 2, "transpose: input must be rank-2");
    check_finite(a, "transpose");
    const int64_t m = a.rows(), n = a.cols();
    std::vector<double> out(static_cast<size_t>(m * n));
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
    return make_op({n, m}, std::move(out), {a}, [m, n](detail::OpCtx& ctx) {
        if (auto* ga = ctx.input_grad(0)) {
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) (*ga)[i * n + j] += ctx.out_grad[j * m + i];
        }
    });
}

Tensor reshape(const Tensor& a, std::vector<int64_t> shape) {
    require(a.defined(), "reshape: undefined input");
    require(shape_numel(shape) == a.size(),
            "reshape: element count mismatch " + shape_str(a.shape()) + " -> " +
                shape_str(shape));
    std::vector<double> out(a.data());
    return make_op(std::move(shape), std::move(out), {a}, [](detail::OpCtx& ctx) {
        if (auto* ga = ctx.input_grad(0))
            for (size_t i = 0; i < ga->size(); ++i) (*ga)[i] += ctx.out_grad[i];
    });
}

Tensor row_softmax(const Tensor& a) {
    require(a.defined(), "row_softmax: undefined input");
    check_finite(a, "row_softmax");
    const int64_t m = a.shape().size() == 2 ? a.rows() : 1;
    const int64_t n = a.shape().size() == 2 ? a.cols() : a.size();
    require(n > 0, "row_softmax: empty rows");
    std::vector<double> out(a.data().size());
    for (int64_t i = 0; i < m; ++i) {
        const double* row = a.data().data() + i * n;
        double mx = row[0];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            out[i * n + j] = std::exp(row[j] - mx);
            z += out[i * n + j];
        }
        for (int64_t j = 0; j < n; ++j) out[i * n + j] /= z;
    }
    return make_op(a.shape(), std::move(out), {a}, [m, n](detail::OpCtx& ctx) {
        auto* ga = ctx.input_grad(0);
        if (!ga) return;
        for (int64_t i = 0; i < m; ++i) {
            const double* y = ctx.out_val.data() + i * n;
            const double* g = ctx.out_grad.data() + i * n;
            double dot = 0.0;
            for (int64_t j = 0; j < n; ++j) dot += y[j] * g[j];
            for (int64_t j = 0; j < n; ++j) (*ga)[i * n + j] += y[j] * (g[j] - dot);
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require(x.defined() && gamma.defined() && beta.defined(), "layer_norm: undefined input");
    require(x.shape().size() == 2, "layer_norm: input must be rank-2");
    require(gamma.shape().size() == 1 && beta.shape().size() == 1,
            "layer_norm: gamma/beta must be rank-1");
    require(gamma.size() == x.cols() && beta.size() == x.cols(),
            "layer_norm: parameter length " + std::to_string(gamma.size()) +
                " vs width " + std::to_string(x.cols()));
    check_finite(x, "layer_norm");
    check_finite(gamma, "layer_norm");
    check_finite(beta, "layer_norm");
    const int64_t m = x.rows(), n = x.cols();
    std::vector<double> out(x.data().size());
    auto xhat = std::make_shared<std::vector<double>>(x.data().size());
    auto inv_sigma = std::make_shared<std::vector<double>>(m);
    for (int64_t i = 0; i < m; ++i) {
        const double* row = x.data().data() + i * n;
        double mu = 0.0;
        for (int64_t j = 0; j < n; ++j) mu += row[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (int64_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(n);
        double is = 1.0 / std::sqrt(var + eps);
        (*inv_sigma)[i] = is;
        for (int64_t j = 0; j < n; ++j) {
            double h = (row[j] - mu) * is;
            (*xhat)[i * n + j] = h;
            out[i * n + j] = gamma.data()[j] * h + beta.data()[j];
        }
    }
    return make_op(x.shape(), std::move(out), {x, gamma, beta},
                   [m, n, xhat, inv_sigma](detail::OpCtx& ctx) {
                       const auto& g = ctx.out_grad;
                       const auto& gam = ctx.input_val(1);
                       if (auto* gg = ctx.input_grad(1)) {
                           for (int64_t i = 0; i < m; ++i)
                               for (int64_t j = 0; j < n; ++j)
                                   (*gg)[j] += g[i * n + j] * (*xhat)[i * n + j];
                       }
                       if (auto* gb = ctx.input_grad(2)) {
                           for (int64_t i = 0; i < m; ++i)
                               for (int64_t j = 0; j < n; ++j) (*gb)[j] += g[i * n + j];
                       }
                       if (auto* gx = ctx.input_grad(0)) {
                           std::vector<double> h(n);
                           for (int64_t i = 0; i < m; ++i) {
                               double mean_h = 0.0, mean_hx = 0.0;
                               for (int64_t j = 0; j < n; ++j) {
                                   h[j] = gam[j] * g[i * n + j];
                                   mean_h += h[j];
                                   mean_hx += h[j] * (*xhat)[i * n + j];
                               }
                               mean_h /= static_cast<double>(n);
                               mean_hx /= static_cast<double>(n);
                               double is = (*inv_sigma)[i];
                               for (int64_t j = 0; j < n; ++j)
                                   (*gx)[i * n + j] +=
                                       is * (h[j] - mean_h - (*xhat)[i * n + j] * mean_hx);
                           }
                       }
                   });
}

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

double gelu_f(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
double gelu_df(double x) {
    return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}
}  // namespace

Tensor gelu(const Tensor& x) { return elementwise_unary(x, "gelu", gelu_f, gelu_df); }

Tensor mean_all(const Tensor& x) {
    require(x.defined(), "mean_all: undefined input");
    check_finite(x, "mean_all");
    double s = 0.0;
    for (double v : x.data()) s += v;
    const double inv = 1.0 / static_cast<double>(x.size());
    return make_op({1}, {s * inv}, {x}, [inv](detail::OpCtx& ctx) {
        if (auto* gx = ctx.input_grad(0))
            for (size_t i = 0; i < gx->size(); ++i) (*gx)[i] += ctx.out_grad[0] * inv;
    });
}

Tensor sum_all(const Tensor& x) {
    require(x.defined(), "sum_all: undefined input");
    check_finite(x, "sum_all");
    double s = 0.0;
    for (double v : x.data()) s += v;
    return make_op({1}, {s}, {x}, [](detail::OpCtx& ctx) {
        if (auto* gx = ctx.input_grad(0))
            for (size_t i = 0; i < gx->size(); ++i) (*gx)[i] += ctx.out_grad[0];
    });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_rows: no inputs");
    const int64_t n = parts[0].cols();
    const size_t rank = parts[0].shape().size();
    int64_t m = 0;
    for (const Tensor& p : parts) {
        require(p.defined(), "concat_rows: undefined input");
        require(p.shape().size() == rank && p.cols() == n,
                "concat_rows: incompatible part shape " + shape_str(p.shape()));
        check_finite(p, "concat_rows");
        m += p.rows();
    }
    std::vector<double> out;
    out.reserve(static_cast<size_t>(m * n));
    for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    std::vector<int64_t> shape = rank == 1 ? std::vector<int64_t>{m}
                                           : std::vector<int64_t>{m, n};
    return make_op(std::move(shape), std::move(out), parts, [n](detail::OpCtx& ctx) {
        size_t off = 0;
        for (size_t i = 0; i < ctx.input_count(); ++i) {
            size_t len = ctx.input_val(i).size();
            if (auto* g = ctx.input_grad(i))
                for (size_t j = 0; j < len; ++j) (*g)[j] += ctx.out_grad[off + j];
            off += len;
        }
        (void)n;
    });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_cols: no inputs");
    const int64_t m = parts[0].rows();
    int64_t n = 0;
    std::vector<int64_t> widths;
    for (const Tensor& p : parts) {
        require(p.defined(), "concat_cols: undefined input");
        require(p.shape().size() == 2 && p.rows() == m,
                "concat_cols: incompatible part shape " + shape_str(p.shape()));
        check_finite(p, "concat_cols");
        widths.push_back(p.cols());
        n += p.cols();
    }
    std::vector<double> out(static_cast<size_t>(m * n));
    int64_t col0 = 0;
    for (size_t pi = 0; pi < parts.size(); ++pi) {
        const Tensor& p = parts[pi];
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < widths[pi]; ++j)
                out[i * n + col0 + j] = p.data()[i * widths[pi] + j];
        col0 += widths[pi];
    }
    return make_op({m, n}, std::move(out), parts, [m, n, widths](detail::OpCtx& ctx) {
        int64_t col0 = 0;
        for (size_t pi = 0; pi < ctx.input_count(); ++pi) {
            if (auto* g = ctx.input_grad(pi)) {
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < widths[pi]; ++j)
                        (*g)[i * widths[pi] + j] += ctx.out_grad[i * n + col0 + j];
            }
            col0 += widths[pi];
        }
    });
}

Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& idx) {
    require(x.defined(), "gather_rows: undefined input");
    check_finite(x, "gather_rows");
    const int64_t m = x.rows(), n = x.cols();
    for (int64_t i : idx)
        require(i >= 0 && i < m, "gather_rows: index " + std::to_string(i) +
                                     " out of range for " + shape_str(x.shape()));
    const int64_t k = static_cast<int64_t>(idx.size());
    std::vector<double> out(static_cast<size_t>(k * n));
    for (int64_t r = 0; r < k; ++r)
        for (int64_t j = 0; j < n; ++j) out[r * n + j] = x.data()[idx[r] * n + j];
    std::vector<int64_t> shape = x.shape().size() == 1 ? std::vector<int64_t>{k}
                                                       : std::vector<int64_t>{k, n};
    return make_op(std::move(shape), std::move(out), {x}, [idx, n](detail::OpCtx& ctx) {
        if (auto* gx = ctx.input_grad(0)) {
            for (size_t r = 0; r < idx.size(); ++r)
                for (int64_t j = 0; j < n; ++j)
                    (*gx)[idx[r] * n + j] += ctx.out_grad[r * n + j];
        }
    });
}

Tensor gather_cols(const Tensor& x, const std::vector<int64_t>& idx) {
    require(x.defined(), "gather_cols: undefined input");
    require(x.shape().size() == 2, "gather_cols: input must be rank-2");
    check_finite(x, "gather_cols");
    const int64_t m = x.rows(), n = x.cols();
    for (int64_t j : idx)
        require(j >= 0 && j < n, "gather_cols: index " + std::to_string(j) +
                                     " out of range for " + shape_str(x.shape()));
    const int64_t k = static_cast<int64_t>(idx.size());
    std::vector<double> out(static_cast<size_t>(m * k));
    for (int64_t i = 0; i < m; ++i)
        for (int64_t c = 0; c < k; ++c) out[i * k + c] = x.data()[i * n + idx[c]];
    return make_op({m, k}, std::move(out), {x}, [idx, m, n, k](detail::OpCtx& ctx) {
        if (auto* gx = ctx.input_grad(0)) {
            for (int64_t i = 0; i < m; ++i)
                for (int64_t c = 0; c < k; ++c)
                    (*gx)[i * n + idx[c]] += ctx.out_grad[i * k + c];
        }
    });
}

Tensor scatter_rows(const Tensor& x, const std::vector<int64_t>& idx, const Tensor& r) {
    require(x.defined() && r.defined(), "scatter_rows: undefined input");
    require(x.shape().size() == 2 && r.shape().size() == 2,
            "scatter_rows: inputs must be rank-2");
    require(r.rows() == static_cast<int64_t>(idx.size()) && r.cols() == x.cols(),
            "scatter_rows: replacement shape " + shape_str(r.shape()) + " vs " +
                std::to_string(idx.size()) + " rows of width " + std::to_string(x.cols()));
    check_finite(x, "scatter_rows");
    check_finite(r, "scatter_rows");
    const int64_t m = x.rows(), n = x.cols();
    std::vector<bool> hit(static_cast<size_t>(m), false);
    for (int64_t i : idx) {
        require(i >= 0 && i < m, "scatter_rows: index " + std::to_string(i) + " out of range");
        require(!hit[static_cast<size_t>(i)], "scatter_rows: duplicate index " + std::to_string(i));
        hit[static_cast<size_t>(i)] = true;
    }
    std::vector<double> out(x.data());
    for (size_t q = 0; q < idx.size(); ++q)
        for (int64_t j = 0; j < n; ++j) out[idx[q] * n + j] = r.data()[q * n + j];
    return make_op(x.shape(), std::move(out), {x, r}, [idx, m, n](detail::OpCtx& ctx) {
        std::vector<bool> replaced(static_cast<size_t>(m), false);
        for (int64_t i : idx) replaced[static_cast<size_t>(i)] = true;
        if (auto* gx = ctx.input_grad(0)) {
            for (int64_t i = 0; i < m; ++i) {
                if (replaced[static_cast<size_t>(i)]) continue;
                for (int64_t j = 0; j < n; ++j) (*gx)[i * n + j] += ctx.out_grad[i * n + j];
            }
        }
        if (auto* gr = ctx.input_grad(1)) {
            for (size_t q = 0; q < idx.size(); ++q)
                for (int64_t j = 0; j < n; ++j)
                    (*gr)[q * n + j] += ctx.out_grad[idx[q] * n + j];
        }
    });
}

namespace {
double exp_f(double x) { return std::exp(x); }
double log_f(double x) { return std::log(x); }
double log_df(double x) { return 1.0 / x; }
double cosh_f(double x) { return std::cosh(x); }
double sinh_f(double x) { return std::sinh(x); }
double square_f(double x) { return x * x; }
double square_df(double x) { return 2.0 * x; }
}  // namespace

Tensor exp(const Tensor& x) { return elementwise_unary(x, "exp", exp_f, exp_f); }
Tensor log(const Tensor& x) { return elementwise_unary(x, "log", log_f, log_df); }
Tensor cosh(const Tensor& x) { return elementwise_unary(x, "cosh", cosh_f, sinh_f); }
Tensor square(const Tensor& x) { return elementwise_unary(x, "square", square_f, square_df); }

Tensor max_of(const Tensor& a, const Tensor& b) {
    binary_same_shape(a, b, "max_of");
    std::vector<double> out(a.data());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::max(out[i], b.data()[i]);
    return make_op(a.shape(), std::move(out), {a, b}, [](detail::OpCtx& ctx) {
        const auto& av = ctx.input_val(0);
        const auto& bv = ctx.input_val(1);
        auto* ga = ctx.input_grad(0);
        auto* gb = ctx.input_grad(1);
        for (size_t i = 0; i < av.size(); ++i) {
            if (av[i] >= bv[i]) {
                if (ga) (*ga)[i] += ctx.out_grad[i];
            } else if (gb) {
                (*gb)[i] += ctx.out_grad[i];
            }
        }
    });
}

Tensor ste_passthrough(const Tensor& hard, const Tensor& soft) {
    binary_same_shape(hard, soft, "ste_passthrough");
    std::vector<double> out(hard.data());
    return make_op(hard.shape(), std::move(out), {hard, soft}, [](detail::OpCtx& ctx) {
        if (auto* gs = ctx.input_grad(1))
            for (size_t i = 0; i < gs->size(); ++i) (*gs)[i] += ctx.out_grad[i];
    });
}

Tensor detach(const Tensor& x) {
    require(x.defined(), "detach: undefined input");
    return Tensor(x.shape(), x.data(), false);
}

}  // namespace diffrate
