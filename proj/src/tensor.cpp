#include "caw/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace caw {

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::unique_ptr<std::vector<double>> grad; // lazily allocated
    bool requires_grad = false;                // leaves: keep grad after backward
    bool tracked = false;                      // participates in a graph
    bool leaf = true;
    bool on_tape = false;
    bool was_on_tape = false;
    bool backward_ran = false;
    std::size_t tape_index = 0;

    std::size_t size() const { return data.size(); }

    std::vector<double>& grad_buf() {
        if (!grad) {
            grad = std::make_unique<std::vector<double>>(data.size(), 0.0);
        }
        return *grad;
    }
};

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << "]";
    return os.str();
}

namespace {

std::size_t shape_product(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        n *= d;
    }
    return n;
}

thread_local int g_no_grad_depth = 0;
thread_local ComputeGraph g_graph;

ImplPtr make_impl(Shape shape, std::vector<double> values) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    return impl;
}

} // namespace
} // namespace detail

using detail::ImplPtr;
using detail::TensorImpl;

// ---------------------------------------------------------------------------
// Tensor handle

Tensor::Tensor() : impl_(detail::make_impl({}, {0.0})) {}

Tensor::Tensor(ImplPtr impl) : impl_(std::move(impl)) {}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    return full(shape, 0.0, requires_grad);
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
    auto impl = detail::make_impl(shape, std::vector<double>(detail::shape_product(shape), value));
    impl->requires_grad = requires_grad;
    impl->tracked = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({}, {value}, requires_grad);
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> values, bool requires_grad) {
    if (detail::shape_product(shape) != values.size()) {
        throw DimensionError("from_data: shape " + detail::shape_str(shape) + " needs " +
                             std::to_string(detail::shape_product(shape)) + " values, got " +
                             std::to_string(values.size()));
    }
    auto impl = detail::make_impl(shape, std::move(values));
    impl->requires_grad = requires_grad;
    impl->tracked = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::from_rows(const std::vector<std::vector<double>>& rows, bool requires_grad) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows[0].size() : 0;
    std::vector<double> values;
    values.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) {
            throw DimensionError("from_rows: ragged rows");
        }
        values.insert(values.end(), row.begin(), row.end());
    }
    return from_data({r, c}, std::move(values), requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }
std::size_t Tensor::size() const { return impl_->data.size(); }
std::size_t Tensor::ndim() const { return impl_->shape.size(); }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= impl_->shape.size()) {
        throw DimensionError("dim: axis out of range");
    }
    return impl_->shape[axis];
}

std::size_t Tensor::rows() const { return dim(0); }
std::size_t Tensor::cols() const { return dim(1); }

bool Tensor::requires_grad() const { return impl_->requires_grad; }
bool Tensor::tracked() const { return impl_->tracked; }
bool Tensor::is_leaf() const { return impl_->leaf; }

std::span<const double> Tensor::data() const { return impl_->data; }

std::span<double> Tensor::data_mut() {
    if (!impl_->leaf) {
        throw ContractError("data_mut: only leaf tensors may be mutated");
    }
    return impl_->data;
}

double Tensor::item() const {
    if (impl_->data.size() != 1) {
        throw ContractError("item: tensor has " + std::to_string(impl_->data.size()) +
                            " elements, expected 1");
    }
    return impl_->data[0];
}

double Tensor::at(std::size_t i, std::size_t j) const {
    if (impl_->shape.size() != 2 || i >= impl_->shape[0] || j >= impl_->shape[1]) {
        throw DimensionError("at: index out of range for shape " +
                             detail::shape_str(impl_->shape));
    }
    return impl_->data[i * impl_->shape[1] + j];
}

bool Tensor::has_grad() const { return impl_->grad != nullptr; }

std::span<const double> Tensor::grad() const {
    if (!impl_->grad) {
        throw ContractError("grad: no gradient populated");
    }
    return *impl_->grad;
}

Tensor Tensor::grad_tensor() const {
    return from_data(impl_->shape, std::vector<double>(grad().begin(), grad().end()));
}

void Tensor::zero_grad() {
    if (impl_->grad) {
        std::fill(impl_->grad->begin(), impl_->grad->end(), 0.0);
    }
}

Tensor Tensor::clone(bool requires_grad) const {
    return from_data(impl_->shape, impl_->data, requires_grad);
}

Tensor Tensor::detach() const { return clone(false); }

void Tensor::backward() const { ComputeGraph::current().run_backward(impl_); }

// ---------------------------------------------------------------------------
// Graph machinery

NoGradGuard::NoGradGuard() { ++detail::g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --detail::g_no_grad_depth; }

bool grad_mode_enabled() { return detail::g_no_grad_depth == 0; }

ComputeGraph& ComputeGraph::current() { return detail::g_graph; }

std::size_t ComputeGraph::size() const { return nodes_.size(); }

void ComputeGraph::record(ImplPtr out, std::vector<ImplPtr> inputs, std::function<void()> pull) {
    out->tracked = true;
    out->leaf = false;
    out->on_tape = true;
    out->was_on_tape = true;
    out->tape_index = nodes_.size();
    nodes_.push_back(Node{std::move(out), std::move(inputs), std::move(pull)});
}

void ComputeGraph::clear() {
    for (Node& node : nodes_) {
        node.out->on_tape = false;
        if (!node.out->requires_grad) {
            node.out->grad.reset(); // intermediate grads are discarded
        }
    }
    nodes_.clear();
}

void ComputeGraph::run_backward(const ImplPtr& root) {
    if (root->size() != 1) {
        throw ContractError("backward: root must be a scalar, got shape " +
                            detail::shape_str(root->shape));
    }
    if (root->backward_ran) {
        throw GraphConsumedError("backward: this root was already swept");
    }
    if (!root->on_tape) {
        if (root->was_on_tape) {
            throw GraphConsumedError("backward: graph already consumed by a previous backward");
        }
        throw ContractError("backward: root was not produced by tracked operations");
    }
    root->grad_buf()[0] = 1.0;
    for (std::size_t i = root->tape_index + 1; i-- > 0;) {
        Node& node = nodes_[i];
        if (node.out->grad) {
            node.pull();
        }
    }
    root->backward_ran = true;
    clear();
}

namespace {

bool should_track(const std::initializer_list<ImplPtr>& inputs) {
    if (!grad_mode_enabled()) {
        return false;
    }
    for (const auto& in : inputs) {
        if (in->tracked) {
            return true;
        }
    }
    return false;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " +
                             detail::shape_str(a.shape()) + " vs " +
                             detail::shape_str(b.shape()));
    }
}

void check_matrix(const Tensor& t, const char* op) {
    if (t.ndim() != 2) {
        throw DimensionError(std::string(op) + ": expected a matrix, got shape " +
                             detail::shape_str(t.shape()));
    }
}

void check_labels(const Labels& y, std::size_t batch, std::size_t classes, const char* op) {
    if (y.size() != batch) {
        throw DimensionError(std::string(op) + ": label count " + std::to_string(y.size()) +
                             " does not match batch " + std::to_string(batch));
    }
    for (std::int32_t label : y) {
        if (label < 0 || static_cast<std::size_t>(label) >= classes) {
            throw DomainError(std::string(op) + ": label " + std::to_string(label) +
                              " out of range [0," + std::to_string(classes) + ")");
        }
    }
}

constexpr double kNormGuard = 1e-12;
constexpr double kLogFloor = 1e-12;

} // namespace

// ---------------------------------------------------------------------------
// Elementwise arithmetic

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    ImplPtr ia = a.impl(), ib = b.impl();
    std::vector<double> out(ia->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = ia->data[i] + ib->data[i];
    }
    auto result = detail::make_impl(ia->shape, std::move(out));
    if (should_track({ia, ib})) {
        ComputeGraph::current().record(result, {ia, ib}, [ia, ib, result] {
            const auto& g = *result->grad;
            if (ia->tracked) {
                auto& ga = ia->grad_buf();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (ib->tracked) {
                auto& gb = ib->grad_buf();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return Tensor(result);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    ImplPtr ia = a.impl(), ib = b.impl();
    std::vector<double> out(ia->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = ia->data[i] - ib->data[i];
    }
    auto result = detail::make_impl(ia->shape, std::move(out));
    if (should_track({ia, ib})) {
        ComputeGraph::current().record(result, {ia, ib}, [ia, ib, result] {
            const auto& g = *result->grad;
            if (ia->tracked) {
                auto& ga = ia->grad_buf();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (ib->tracked) {
                auto& gb = ib->grad_buf();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }
    return Tensor(result);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    ImplPtr ia = a.impl(), ib = b.impl();
    std::vector<double> out(ia->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = ia->data[i] * ib->data[i];
    }
    auto result = detail::make_impl(ia->shape, std::move(out));
    if (should_track({ia, ib})) {
        ComputeGraph::current().record(result, {ia, ib}, [ia, ib, result] {
            const auto& g = *result->grad;
            if (ia->tracked) {
                auto& ga = ia->grad_buf();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * ib->data[i];
            }
            if (ib->tracked) {
                auto& gb = ib->grad_buf();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ia->data[i];
            }
        });
    }
    return Tensor(result);
}

Tensor add_scalar(const Tensor& a, double s) {
    ImplPtr ia = a.impl();
    std::vector<double> out(ia->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = ia->data[i] + s;
    }
    auto result = detail::make_impl(ia->shape, std::move(out));
    if (should_track({ia})) {
        ComputeGraph::current().record(result, {ia}, [ia, result] {
            const auto& g = *result->grad;
            auto& ga = ia->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        });
    }
    return Tensor(result);
}

Tensor mul_scalar(const Tensor& a, double s) {
    ImplPtr ia = a.impl();
    std::vector<double> out(ia->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = ia->data[i] * s;
    }
    auto result = detail::make_impl(ia->shape, std::move(out));
    if (should_track({ia})) {
        ComputeGraph::current().record(result, {ia}, [ia, result, s] {
            const auto& g = *result->grad;
            auto& ga = ia->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
        });
    }
    return Tensor(result);
}

Tensor rsub_scalar(double s, const Tensor& a) {
    ImplPtr ia = a.impl();
    std::vector<double> out(ia->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = s - ia->data[i];
    }
    auto result = detail::make_impl(ia->shape, std::move(out));
    if (should_track({ia})) {
        ComputeGraph::current().record(result, {ia}, [ia, result] {
            const auto& g = *result->grad;
            auto& ga = ia->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] -= g[i];
        });
    }
    return Tensor(result);
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_matrix(a, "matmul");
    check_matrix(b, "matmul");
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: inner dimensions " + detail::shape_str(a.shape()) +
                             " vs " + detail::shape_str(b.shape()));
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    ImplPtr ia = a.impl(), ib = b.impl();
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t l = 0; l < k; ++l) {
            const double av = ia->data[i * k + l];
            for (std::size_t j = 0; j < n; ++j) {
                out[i * n + j] += av * ib->data[l * n + j];
            }
        }
    }
    auto result = detail::make_impl({m, n}, std::move(out));
    if (should_track({ia, ib})) {
        ComputeGraph::current().record(result, {ia, ib}, [ia, ib, result, m, k, n] {
            const auto& g = *result->grad;
            if (ia->tracked) {
                auto& ga = ia->grad_buf();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        const double gv = g[i * n + j];
                        for (std::size_t l = 0; l < k; ++l) {
                            ga[i * k + l] += gv * ib->data[l * n + j];
                        }
                    }
                }
            }
            if (ib->tracked) {
                auto& gb = ib->grad_buf();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t l = 0; l < k; ++l) {
                        const double av = ia->data[i * k + l];
                        for (std::size_t j = 0; j < n; ++j) {
                            gb[l * n + j] += av * g[i * n + j];
                        }
                    }
                }
            }
        });
    }
    return Tensor(result);
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    check_matrix(a, "matmul_nt");
    check_matrix(b, "matmul_nt");
    if (a.cols() != b.cols()) {
        throw DimensionError("matmul_nt: inner dimensions " + detail::shape_str(a.shape()) +
                             " vs " + detail::shape_str(b.shape()));
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    ImplPtr ia = a.impl(), ib = b.impl();
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t l = 0; l < k; ++l) {
                acc += ia->data[i * k + l] * ib->data[j * k + l];
            }
            out[i * n + j] = acc;
        }
    }
    auto result = detail::make_impl({m, n}, std::move(out));
    if (should_track({ia, ib})) {
        ComputeGraph::current().record(result, {ia, ib}, [ia, ib, result, m, k, n] {
            const auto& g = *result->grad;
            if (ia->tracked) {
                auto& ga = ia->grad_buf();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        const double gv = g[i * n + j];
                        for (std::size_t l = 0; l < k; ++l) {
                            ga[i * k + l] += gv * ib->data[j * k + l];
                        }
                    }
                }
            }
            if (ib->tracked) {
                auto& gb = ib->grad_buf();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        const double gv = g[i * n + j];
                        for (std::size_t l = 0; l < k; ++l) {
                            gb[j * k + l] += gv * ia->data[i * k + l];
                        }
                    }
                }
            }
        });
    }
    return Tensor(result);
}

Tensor transpose(const Tensor& a) {
    check_matrix(a, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    ImplPtr ia = a.impl();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[j * m + i] = ia->data[i * n + j];
        }
    }
    auto result = detail::make_impl({n, m}, std::move(out));
    if (should_track({ia})) {
        ComputeGraph::current().record(result, {ia}, [ia, result, m, n] {
            const auto& g = *result->grad;
            auto& ga = ia->grad_buf();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    ga[i * n + j] += g[j * m + i];
                }
            }
        });
    }
    return Tensor(result);
}

Tensor add_row_broadcast(const Tensor& x, const Tensor& row) {
    check_matrix(x, "add_row_broadcast");
    if (row.ndim() != 1 || row.dim(0) != x.cols()) {
        throw DimensionError("add_row_broadcast: row shape " + detail::shape_str(row.shape()) +
                             " does not match " + detail::shape_str(x.shape()));
    }
    const std::size_t m = x.rows(), n = x.cols();
    ImplPtr ix = x.impl(), ir = row.impl();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = ix->data[i * n + j] + ir->data[j];
        }
    }
    auto result = detail::make_impl({m, n}, std::move(out));
    if (should_track({ix, ir})) {
        ComputeGraph::current().record(result, {ix, ir}, [ix, ir, result, m, n] {
            const auto& g = *result->grad;
            if (ix->tracked) {
                auto& gx = ix->grad_buf();
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (ir->tracked) {
                auto& gr = ir->grad_buf();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        gr[j] += g[i * n + j];
                    }
                }
            }
        });
    }
    return Tensor(result);
}

// ---------------------------------------------------------------------------
// Pointwise functions

Tensor tanh(const Tensor& a) {
    ImplPtr ia = a.impl();
    std::vector<double> out(ia->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::tanh(ia->data[i]);
    }
    auto result = detail::make_impl(ia->shape, std::move(out));
    if (should_track({ia})) {
        ComputeGraph::current().record(result, {ia}, [ia, result] {
            const auto& g = *result->grad;
            auto& ga = ia->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double t = result->data[i];
                ga[i] += g[i] * (1.0 - t * t);
            }
        });
    }
    return Tensor(result);
}

Tensor exp(const Tensor& a) {
    ImplPtr ia = a.impl();
    std::vector<double> out(ia->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::exp(ia->data[i]);
        if (!std::isfinite(out[i])) {
            throw NumericError("exp: overflow at input " + std::to_string(ia->data[i]));
        }
    }
    auto result = detail::make_impl(ia->shape, std::move(out));
    if (should_track({ia})) {
        ComputeGraph::current().record(result, {ia}, [ia, result] {
            const auto& g = *result->grad;
            auto& ga = ia->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * result->data[i];
        });
    }
    return Tensor(result);
}

Tensor log(const Tensor& a) {
    ImplPtr ia = a.impl();
    std::vector<double> out(ia->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!(ia->data[i] > 0.0)) {
            throw DomainError("log: input " + std::to_string(ia->data[i]) + " outside (0, inf)");
        }
        out[i] = std::log(ia->data[i]);
    }
    auto result = detail::make_impl(ia->shape, std::move(out));
    if (should_track({ia})) {
        ComputeGraph::current().record(result, {ia}, [ia, result] {
            const auto& g = *result->grad;
            auto& ga = ia->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / ia->data[i];
        });
    }
    return Tensor(result);
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
    ImplPtr ia = a.impl();
    double acc = 0.0;
    for (double v : ia->data) {
        acc += v;
    }
    auto result = detail::make_impl({}, {acc});
    if (should_track({ia})) {
        ComputeGraph::current().record(result, {ia}, [ia, result] {
            const double g = (*result->grad)[0];
            auto& ga = ia->grad_buf();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
        });
    }
    return Tensor(result);
}

Tensor mean(const Tensor& a) {
    if (a.size() == 0) {
        throw DimensionError("mean: empty tensor");
    }
    ImplPtr ia = a.impl();
    double acc = 0.0;
    for (double v : ia->data) {
        acc += v;
    }
    const double inv = 1.0 / static_cast<double>(ia->data.size());
    auto result = detail::make_impl({}, {acc * inv});
    if (should_track({ia})) {
        ComputeGraph::current().record(result, {ia}, [ia, result, inv] {
            const double g = (*result->grad)[0] * inv;
            auto& ga = ia->grad_buf();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
        });
    }
    return Tensor(result);
}

// ---------------------------------------------------------------------------
// Row-structured ops

Tensor softmax_rows(const Tensor& logits) {
    check_matrix(logits, "softmax_rows");
    const std::size_t b = logits.rows(), c = logits.cols();
    if (b == 0 || c == 0) {
        throw DimensionError("softmax_rows: empty tensor " + detail::shape_str(logits.shape()));
    }
    ImplPtr il = logits.impl();
    std::vector<double> out(b * c);
    for (std::size_t i = 0; i < b; ++i) {
        const double* x = il->data.data() + i * c;
        double m = x[0];
        for (std::size_t j = 0; j < c; ++j) {
            if (!std::isfinite(x[j])) {
                throw NumericError("softmax_rows: non-finite logit");
            }
            m = std::max(m, x[j]);
        }
        double denom = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            out[i * c + j] = std::exp(x[j] - m);
            denom += out[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) {
            out[i * c + j] /= denom;
        }
    }
    auto result = detail::make_impl({b, c}, std::move(out));
    if (should_track({il})) {
        ComputeGraph::current().record(result, {il}, [il, result, b, c] {
            const auto& g = *result->grad;
            auto& gl = il->grad_buf();
            for (std::size_t i = 0; i < b; ++i) {
                const double* p = result->data.data() + i * c;
                double dot = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    dot += g[i * c + j] * p[j];
                }
                for (std::size_t j = 0; j < c; ++j) {
                    gl[i * c + j] += p[j] * (g[i * c + j] - dot);
                }
            }
        });
    }
    return Tensor(result);
}

Tensor kl_divergence_rows(const Tensor& p, const Tensor& q) {
    check_same_shape(p, q, "kl_divergence_rows");
    check_matrix(p, "kl_divergence_rows");
    const std::size_t b = p.rows(), c = p.cols();
    ImplPtr ip = p.impl(), iq = q.impl();
    auto check_stochastic = [&](const ImplPtr& t, const char* name) {
        for (std::size_t i = 0; i < b; ++i) {
            double rowsum = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                const double v = t->data[i * c + j];
                if (v < -1e-9 || !std::isfinite(v)) {
                    throw DomainError(std::string("kl_divergence_rows: ") + name + " row " +
                                      std::to_string(i) + " has invalid entry " +
                                      std::to_string(v));
                }
                rowsum += v;
            }
            if (std::abs(rowsum - 1.0) > 1e-6) {
                throw DomainError(std::string("kl_divergence_rows: ") + name + " row " +
                                  std::to_string(i) + " sums to " + std::to_string(rowsum));
            }
        }
    };
    check_stochastic(ip, "p");
    check_stochastic(iq, "q");
    std::vector<double> out(b, 0.0);
    for (std::size_t i = 0; i < b; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double pv = ip->data[i * c + j];
            const double qv = iq->data[i * c + j];
            acc += pv * (std::log(std::max(pv, kLogFloor)) - std::log(std::max(qv, kLogFloor)));
        }
        out[i] = acc;
    }
    auto result = detail::make_impl({b}, std::move(out));
    if (should_track({ip, iq})) {
        ComputeGraph::current().record(result, {ip, iq}, [ip, iq, result, b, c] {
            const auto& g = *result->grad;
            for (std::size_t i = 0; i < b; ++i) {
                const double gi = g[i];
                for (std::size_t j = 0; j < c; ++j) {
                    const double pv = ip->data[i * c + j];
                    const double qv = iq->data[i * c + j];
                    if (ip->tracked) {
                        const double logterm = std::log(std::max(pv, kLogFloor)) -
                                               std::log(std::max(qv, kLogFloor));
                        ip->grad_buf()[i * c + j] +=
                            gi * (logterm + (pv > kLogFloor ? 1.0 : 0.0));
                    }
                    if (iq->tracked && qv > kLogFloor) {
                        iq->grad_buf()[i * c + j] -= gi * pv / qv;
                    }
                }
            }
        });
    }
    return Tensor(result);
}

Tensor cross_entropy_with_logits(const Tensor& logits, const Labels& y) {
    check_matrix(logits, "cross_entropy_with_logits");
    const std::size_t b = logits.rows(), c = logits.cols();
    if (b == 0 || c == 0) {
        throw DimensionError("cross_entropy_with_logits: empty logits");
    }
    check_labels(y, b, c, "cross_entropy_with_logits");
    ImplPtr il = logits.impl();
    std::vector<double> probs(b * c);
    double total = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        const double* x = il->data.data() + i * c;
        double m = x[0];
        for (std::size_t j = 0; j < c; ++j) {
            m = std::max(m, x[j]);
        }
        double denom = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            probs[i * c + j] = std::exp(x[j] - m);
            denom += probs[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) {
            probs[i * c + j] /= denom;
        }
        total += (m + std::log(denom)) - x[y[i]];
    }
    const double inv_b = 1.0 / static_cast<double>(b);
    auto result = detail::make_impl({}, {total * inv_b});
    if (!std::isfinite(result->data[0])) {
        throw NumericError("cross_entropy_with_logits: non-finite loss");
    }
    if (should_track({il})) {
        Labels labels = y;
        ComputeGraph::current().record(
            result, {il}, [il, result, probs = std::move(probs), labels, b, c, inv_b] {
                const double g = (*result->grad)[0] * inv_b;
                auto& gl = il->grad_buf();
                for (std::size_t i = 0; i < b; ++i) {
                    for (std::size_t j = 0; j < c; ++j) {
                        const double indicator =
                            (j == static_cast<std::size_t>(labels[i])) ? 1.0 : 0.0;
                        gl[i * c + j] += g * (probs[i * c + j] - indicator);
                    }
                }
            });
    }
    return Tensor(result);
}

Tensor gather_rows(const Tensor& p, const Labels& y) {
    check_matrix(p, "gather_rows");
    const std::size_t b = p.rows(), c = p.cols();
    check_labels(y, b, c, "gather_rows");
    ImplPtr ip = p.impl();
    std::vector<double> out(b);
    for (std::size_t i = 0; i < b; ++i) {
        out[i] = ip->data[i * c + static_cast<std::size_t>(y[i])];
    }
    auto result = detail::make_impl({b}, std::move(out));
    if (should_track({ip})) {
        Labels labels = y;
        ComputeGraph::current().record(result, {ip}, [ip, result, labels, c] {
            const auto& g = *result->grad;
            auto& gp = ip->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) {
                gp[i * c + static_cast<std::size_t>(labels[i])] += g[i];
            }
        });
    }
    return Tensor(result);
}

Tensor cw_margin(const Tensor& logits, const Labels& y) {
    check_matrix(logits, "cw_margin");
    const std::size_t b = logits.rows(), c = logits.cols();
    if (c < 2) {
        throw DimensionError("cw_margin: needs at least 2 classes");
    }
    check_labels(y, b, c, "cw_margin");
    ImplPtr il = logits.impl();
    std::vector<double> out(b);
    std::vector<std::size_t> best(b); // argmax over wrong classes, lowest index wins ties
    for (std::size_t i = 0; i < b; ++i) {
        const double* x = il->data.data() + i * c;
        const std::size_t yi = static_cast<std::size_t>(y[i]);
        std::size_t j_star = yi == 0 ? 1 : 0;
        for (std::size_t j = 0; j < c; ++j) {
            if (j != yi && x[j] > x[j_star]) {
                j_star = j;
            }
        }
        best[i] = j_star;
        out[i] = x[j_star] - x[yi];
    }
    auto result = detail::make_impl({b}, std::move(out));
    if (should_track({il})) {
        Labels labels = y;
        ComputeGraph::current().record(result, {il},
                                       [il, result, labels, best = std::move(best), c] {
            const auto& g = *result->grad;
            auto& gl = il->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) {
                gl[i * c + best[i]] += g[i];
                gl[i * c + static_cast<std::size_t>(labels[i])] -= g[i];
            }
        });
    }
    return Tensor(result);
}

Tensor l2_norm_rows(const Tensor& x) {
    check_matrix(x, "l2_norm_rows");
    const std::size_t b = x.rows(), d = x.cols();
    ImplPtr ix = x.impl();
    std::vector<double> out(b);
    for (std::size_t i = 0; i < b; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double v = ix->data[i * d + j];
            acc += v * v;
        }
        out[i] = std::sqrt(acc);
    }
    auto result = detail::make_impl({b}, std::move(out));
    if (should_track({ix})) {
        ComputeGraph::current().record(result, {ix}, [ix, result, b, d] {
            const auto& g = *result->grad;
            auto& gx = ix->grad_buf();
            for (std::size_t i = 0; i < b; ++i) {
                const double scale = g[i] / std::max(result->data[i], kNormGuard);
                for (std::size_t j = 0; j < d; ++j) {
                    gx[i * d + j] += scale * ix->data[i * d + j];
                }
            }
        });
    }
    return Tensor(result);
}

Tensor normalize_rows(const Tensor& x) {
    check_matrix(x, "normalize_rows");
    const std::size_t b = x.rows(), d = x.cols();
    ImplPtr ix = x.impl();
    std::vector<double> norms(b);
    std::vector<double> out(b * d);
    for (std::size_t i = 0; i < b; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double v = ix->data[i * d + j];
            acc += v * v;
        }
        norms[i] = std::max(std::sqrt(acc), kNormGuard);
        for (std::size_t j = 0; j < d; ++j) {
            out[i * d + j] = ix->data[i * d + j] / norms[i];
        }
    }
    auto result = detail::make_impl({b, d}, std::move(out));
    if (should_track({ix})) {
        ComputeGraph::current().record(result, {ix},
                                       [ix, result, norms = std::move(norms), b, d] {
            const auto& g = *result->grad;
            auto& gx = ix->grad_buf();
            for (std::size_t i = 0; i < b; ++i) {
                const double* u = result->data.data() + i * d; // unit row
                double dot = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    dot += g[i * d + j] * u[j];
                }
                for (std::size_t j = 0; j < d; ++j) {
                    gx[i * d + j] += (g[i * d + j] - dot * u[j]) / norms[i];
                }
            }
        });
    }
    return Tensor(result);
}

// ---------------------------------------------------------------------------
// Finite differences

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double h) {
    if (!(h > 0.0)) {
        throw ContractError("finite_diff_grad: h must be positive");
    }
    NoGradGuard no_grad;
    std::vector<double> base(x.data().begin(), x.data().end());
    std::vector<double> grad(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
        std::vector<double> hi = base, lo = base;
        hi[i] += h;
        lo[i] -= h;
        const double f_hi = f(Tensor::from_data(x.shape(), std::move(hi)));
        const double f_lo = f(Tensor::from_data(x.shape(), std::move(lo)));
        if (!std::isfinite(f_hi) || !std::isfinite(f_lo)) {
            throw NumericError("finite_diff_grad: non-finite evaluation at coordinate " +
                               std::to_string(i));
        }
        grad[i] = (f_hi - f_lo) / (2.0 * h);
    }
    return Tensor::from_data(x.shape(), std::move(grad));
}

} // namespace caw
