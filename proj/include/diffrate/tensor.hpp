// Dense double-precision tensors with reverse-mode automatic differentiation.
// Rank 1 and rank 2 only, no implicit broadcasting; every op validates shapes
// and rejects non-finite inputs. Gradients are tracked on a dynamically built
// graph and resolved by backward() in reverse creation order.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace diffrate {

class Tensor;

namespace detail {

struct TensorNode;

struct OpCtx {
    const std::vector<double>& out_grad;
    const std::vector<double>& out_val;
    size_t input_count() const;
    const std::vector<double>& input_val(size_t i) const;
    // nullptr when input i does not participate in gradient flow
    std::vector<double>* input_grad(size_t i);

    std::vector<TensorNode*> nodes;  // internal
};

using BackwardFn = std::function<void(OpCtx&)>;

// Creates an op node. `bw` must accumulate (+=) into input grads.
Tensor make_op(std::vector<int64_t> shape, std::vector<double> val,
               const std::vector<Tensor>& inputs, BackwardFn bw);

[[noreturn]] void fail(const std::string& msg);
void require(bool ok, const std::string& msg);
std::string shape_str(const std::vector<int64_t>& s);
void check_finite(const Tensor& t, const char* op);

}  // namespace detail

class Tensor {
public:
    Tensor() = default;
    Tensor(std::vector<int64_t> shape, double fill, bool requires_grad = false);
    Tensor(std::vector<int64_t> shape, std::vector<double> data, bool requires_grad = false);

    static Tensor scalar(double v, bool requires_grad = false);

    bool defined() const { return n_ != nullptr; }
    const std::vector<int64_t>& shape() const;
    int64_t size() const;
    int64_t rows() const;  // rank-1: size, rank-2: shape[0]
    int64_t cols() const;  // rank-1: 1,    rank-2: shape[1]
    bool same_shape(const Tensor& other) const;

    double value() const;  // size-1 tensors
    double at(int64_t i) const;
    double at(int64_t r, int64_t c) const;
    const std::vector<double>& data() const;
    std::vector<double>& data_mut();  // leaf tensors only

    bool requires_grad() const;
    bool needs_grad() const;
    bool has_grad() const;
    const std::vector<double>& grad() const;
    Tensor grad_tensor() const;
    void zero_grad();
    // Installs an externally reduced gradient on a leaf tensor.
    void set_grad(std::vector<double> g);

    uint64_t id() const;

private:
    std::shared_ptr<detail::TensorNode> n_;
    explicit Tensor(std::shared_ptr<detail::TensorNode> n) : n_(std::move(n)) {}

    friend struct detail::OpCtx;
    friend Tensor detail::make_op(std::vector<int64_t>, std::vector<double>,
                                  const std::vector<Tensor>&, detail::BackwardFn);
    friend void backward(const Tensor&);
    friend struct GradientTape;
};

// Ordered record of the operations reachable from a root, oldest first.
// Entry i's inputs always appear earlier in the list (or are leaves).
struct GradientTape {
    struct Entry {
        uint64_t output_id = 0;
        std::vector<uint64_t> input_ids;
    };
    std::vector<Entry> entries;

    static GradientTape of(const Tensor& root);
};

// Runs reverse-mode differentiation from a scalar root. Populates grad() on
// every node that needs it; gradients from multiple consumers accumulate.
void backward(const Tensor& root);

// ---- primitives -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor add_rowwise(const Tensor& x, const Tensor& v);  // [m,n] + [n] per row
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, std::vector<int64_t> shape);
Tensor row_softmax(const Tensor& a);  // rank-1 treated as one row
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-6);
Tensor gelu(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor sum_all(const Tensor& x);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& idx);
Tensor gather_cols(const Tensor& x, const std::vector<int64_t>& idx);
// Copy of x with rows idx replaced by the rows of r (idx must be unique).
Tensor scatter_rows(const Tensor& x, const std::vector<int64_t>& idx, const Tensor& r);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor cosh(const Tensor& x);
Tensor square(const Tensor& x);
// Elementwise max; subgradient routes to the larger input (ties: first).
Tensor max_of(const Tensor& a, const Tensor& b);
// Forward value of `hard`; backward passes the upstream gradient to `soft`
// unchanged and sends nothing to `hard`.
Tensor ste_passthrough(const Tensor& hard, const Tensor& soft);
// Constant copy: same values, no gradient connection.
Tensor detach(const Tensor& x);

}  // namespace diffrate
