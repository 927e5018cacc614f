#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "caw/errors.hpp"

namespace caw {

using Shape = std::vector<std::size_t>;
using Labels = std::vector<std::int32_t>;

namespace detail {
struct TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;
} // namespace detail

/// Dense row-major float64 tensor with reverse-mode automatic
/// differentiation. Handles share storage; clone() makes deep copies.
/// Operations on tracked tensors are recorded on the per-thread
/// ComputeGraph and replayed in reverse by backward().
///
/// Tensors are immutable after construction except for gradient
/// accumulation during backward() and explicit data_mut() on leaves
/// (used by the optimizer and the attack inner loops between graphs).
class Tensor {
public:
    Tensor(); // empty scalar 0, not tracked

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor from_data(const Shape& shape, std::vector<double> values,
                            bool requires_grad = false);
    static Tensor from_rows(const std::vector<std::vector<double>>& rows,
                            bool requires_grad = false);

    const Shape& shape() const;
    std::size_t size() const;
    std::size_t ndim() const;
    std::size_t dim(std::size_t axis) const;
    std::size_t rows() const; // dim 0 for matrices
    std::size_t cols() const; // dim 1 for matrices

    bool requires_grad() const;
    bool tracked() const; // participates in the live graph
    bool is_leaf() const;

    std::span<const double> data() const;
    /// Mutable view of a leaf's storage. Throws ContractError on graph
    /// nodes: mutating an intermediate would corrupt a pending backward.
    std::span<double> data_mut();

    double item() const; // size-1 tensors only
    double at(std::size_t i, std::size_t j) const;

    bool has_grad() const;
    std::span<const double> grad() const;
    Tensor grad_tensor() const;
    void zero_grad();

    /// Deep copy, detached from any graph.
    Tensor clone(bool requires_grad = false) const;
    /// Value passthrough, gradient barrier.
    Tensor detach() const;

    /// Reverse-mode sweep from a scalar root. Populates grad on every
    /// requires_grad leaf the root depends on, then frees the graph.
    /// A second backward without a fresh forward throws GraphConsumedError.
    void backward() const;

    detail::ImplPtr impl() const { return impl_; }
    explicit Tensor(detail::ImplPtr impl);

private:
    detail::ImplPtr impl_;
};

/// Operations performed while a NoGradGuard is alive are not recorded.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_mode_enabled();

/// Per-thread tape of recorded operations. Insertion order is the
/// topological order; backward() walks it once in reverse and clears it.
class ComputeGraph {
public:
    static ComputeGraph& current();

    std::size_t size() const;
    void clear();

    // internal
    void record(detail::ImplPtr out, std::vector<detail::ImplPtr> inputs,
                std::function<void()> pull);
    void run_backward(const detail::ImplPtr& root);

private:
    struct Node {
        detail::ImplPtr out;
        std::vector<detail::ImplPtr> inputs;
        std::function<void()> pull;
    };
    std::vector<Node> nodes_;
};

// ---- elementwise arithmetic ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor rsub_scalar(double s, const Tensor& a); // s - a

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);    // [m,k]x[k,n] -> [m,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b); // [m,k]x[n,k]^T -> [m,n]
Tensor transpose(const Tensor& a);
Tensor add_row_broadcast(const Tensor& x, const Tensor& row); // x[i,:] + row

// ---- pointwise functions ----
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a); // domain |x| <= ~709 for finite output
Tensor log(const Tensor& a); // domain x > 0

// ---- reductions ----
Tensor sum(const Tensor& a);  // scalar
Tensor mean(const Tensor& a); // scalar

// ---- row-structured ops ----
/// Row-stabilized softmax: subtracts the row max before exponentiation,
/// so rows with range > 700 stay finite.
Tensor softmax_rows(const Tensor& logits);

/// Per-row KL(p_i || q_i) with a 1e-12 floor inside both logs. Both
/// inputs must be row-stochastic within 1e-6. Gradient flows through
/// both arguments unless the caller detaches one.
Tensor kl_divergence_rows(const Tensor& p, const Tensor& q);

/// Mean over the batch of -log softmax(logits)[i, y_i], computed via a
/// stabilized log-sum-exp.
Tensor cross_entropy_with_logits(const Tensor& logits, const Labels& y);

/// out[i] = p[i, y[i]].
Tensor gather_rows(const Tensor& p, const Labels& y);

/// Per-row Carlini-Wagner margin: max_{j != y_i} logit_j - logit_{y_i}.
Tensor cw_margin(const Tensor& logits, const Labels& y);

/// Per-row Euclidean norm (not squared); gradient uses a 1e-12 guard.
Tensor l2_norm_rows(const Tensor& x);

/// Rows scaled to unit norm with a 1e-12 guard on the divisor.
Tensor normalize_rows(const Tensor& x);

/// Central-difference gradient (f(x+h e_i) - f(x-h e_i)) / (2h).
/// Independent of the reverse-mode path by construction: it only runs
/// forward evaluations of f. Throws NumericError on non-finite f.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double h);

namespace detail {
std::string shape_str(const Shape& shape);
}

} // namespace caw
