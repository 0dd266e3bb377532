#include "dualinc/autodiff.hpp"

#include "dualinc/errors.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <unordered_set>

namespace dualinc::ad {

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    bool leaf = true;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
};

}  // namespace detail

using detail::Node;

std::string to_string(const Shape& s) {
    return "[" + std::to_string(s.rows) + "x" + std::to_string(s.cols) + "]";
}

namespace {

void check_finite(const std::vector<double>& v, const char* op) {
    for (double x : v) {
        if (!std::isfinite(x)) throw NumericalError(std::string(op) + ": non-finite result");
    }
}

const Node& ref(const Tensor& t, const char* op) {
    if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
    return *t.node();
}

// Gradient buffer of a parent, or nullptr when it does not take gradients.
double* grad_of(Node& n) {
    if (!n.requires_grad) return nullptr;
    if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
    return n.grad.data();
}

Tensor make_result(Shape shape, std::vector<double> value, const char* op,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(Node&)> fn) {
    check_finite(value, op);
    auto node = std::make_shared<Node>();
    node->shape = shape;
    node->value = std::move(value);
    bool any = false;
    for (const Tensor* t : inputs) any = any || t->node()->requires_grad;
    if (any) {
        node->requires_grad = true;
        node->leaf = false;
        node->parents.reserve(inputs.size());
        for (const Tensor* t : inputs) node->parents.push_back(t->node());
        node->backward_fn = std::move(fn);
    }
    return Tensor(std::move(node));
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

// C[m x n] += A[m x k] * B[k x n]
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c) {
    MMap(c, m, n).noalias() += CMap(a, m, k) * CMap(b, k, n);
}

// C[m x k] += A[m x n] * B[k x n]^T
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c) {
    MMap(c, m, k).noalias() += CMap(a, m, n) * CMap(b, k, n).transpose();
}

// C[k x n] += A[m x k]^T * B[m x n]
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c) {
    MMap(c, k, n).noalias() += CMap(a, m, k).transpose() * CMap(b, m, n);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) +
                             " vs " + to_string(b.shape()));
    }
}

void require_scalar(const Tensor& s, const char* op) {
    if (s.shape() != Shape{1, 1}) {
        throw DimensionError(std::string(op) + ": expected 1x1 scalar, got " +
                             to_string(s.shape()));
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return from(shape, std::vector<double>(shape.size(), 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    return from(shape, std::vector<double>(shape.size(), value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    if (values.size() != shape.size()) {
        throw DimensionError("Tensor::from: " + std::to_string(values.size()) +
                             " values for shape " + to_string(shape));
    }
    auto node = std::make_shared<Node>();
    node->shape = shape;
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::row(std::vector<double> values, bool requires_grad) {
    const Shape s{1, values.size()};
    return from(s, std::move(values), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from({1, 1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return ref(*this, "shape").shape; }

std::span<const double> Tensor::data() const { return ref(*this, "data").value; }

std::span<double> Tensor::mutable_data() {
    ref(*this, "mutable_data");
    return node_->value;
}

double Tensor::item() const {
    const auto& n = ref(*this, "item");
    if (n.value.size() != 1) throw ContractError("item: tensor is not a scalar");
    return n.value[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
    const auto& n = ref(*this, "at");
    if (r >= n.shape.rows || c >= n.shape.cols) throw IndexError("at: index out of range");
    return n.value[r * n.shape.cols + c];
}

bool Tensor::requires_grad() const { return ref(*this, "requires_grad").requires_grad; }

void Tensor::set_requires_grad(bool on) {
    ref(*this, "set_requires_grad");
    if (!node_->leaf) throw ContractError("set_requires_grad: only leaves can change");
    node_->requires_grad = on;
}

bool Tensor::is_leaf() const { return ref(*this, "is_leaf").leaf; }

bool Tensor::has_grad() const {
    const auto& n = ref(*this, "has_grad");
    return !n.grad.empty() || n.value.empty();
}

std::span<const double> Tensor::grad() const { return ref(*this, "grad").grad; }

std::span<double> Tensor::mutable_grad() {
    ref(*this, "mutable_grad");
    if (node_->grad.size() != node_->value.size()) node_->grad.assign(node_->value.size(), 0.0);
    return node_->grad;
}

void Tensor::zero_grad() {
    ref(*this, "zero_grad");
    node_->grad.assign(node_->value.size(), 0.0);
}

void Tensor::drop_grad() {
    ref(*this, "drop_grad");
    node_->grad.clear();
    node_->grad.shrink_to_fit();
}

Tensor Tensor::clone(bool requires_grad) const {
    const auto& n = ref(*this, "clone");
    return from(n.shape, n.value, requires_grad);
}

// ---------------------------------------------------------------------------
// Ops

Tensor matmul(const Tensor& a, const Tensor& b) {
    const auto& na = ref(a, "matmul");
    const auto& nb = ref(b, "matmul");
    if (na.shape.cols != nb.shape.rows) {
        throw DimensionError("matmul: inner extents differ " + to_string(na.shape) + " * " +
                             to_string(nb.shape));
    }
    const std::size_t m = na.shape.rows, k = na.shape.cols, n = nb.shape.cols;
    std::vector<double> out(m * n, 0.0);
    gemm_nn(m, k, n, na.value.data(), nb.value.data(), out.data());
    return make_result({m, n}, std::move(out), "matmul", {&a, &b}, [m, k, n](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (double* ga = grad_of(pa)) gemm_nt(m, n, k, self.grad.data(), pb.value.data(), ga);
        if (double* gb = grad_of(pb)) gemm_tn(m, k, n, pa.value.data(), self.grad.data(), gb);
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    ref(a, "add");
    ref(b, "add");
    require_same_shape(a, b, "add");
    std::vector<double> out(a.data().begin(), a.data().end());
    const auto bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return make_result(a.shape(), std::move(out), "add", {&a, &b}, [](Node& self) {
        for (auto& p : self.parents) {
            if (double* g = grad_of(*p)) {
                for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
            }
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    ref(a, "sub");
    ref(b, "sub");
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.data().begin(), a.data().end());
    const auto bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return make_result(a.shape(), std::move(out), "sub", {&a, &b}, [](Node& self) {
        if (double* g = grad_of(*self.parents[0])) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
        if (double* g = grad_of(*self.parents[1])) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    ref(a, "mul");
    ref(b, "mul");
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.data().begin(), a.data().end());
    const auto bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return make_result(a.shape(), std::move(out), "mul", {&a, &b}, [](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (double* g = grad_of(pa)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pb.value[i];
        }
        if (double* g = grad_of(pb)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pa.value[i];
        }
    });
}

Tensor add_n(std::span<const Tensor> terms) {
    if (terms.empty()) throw ContractError("add_n: no terms");
    const Shape shape = ref(terms[0], "add_n").shape;
    std::vector<double> out(shape.size(), 0.0);
    for (const auto& t : terms) {
        require_same_shape(terms[0], t, "add_n");
        const auto v = t.data();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i];
    }
    check_finite(out, "add_n");
    auto node = std::make_shared<Node>();
    node->shape = shape;
    node->value = std::move(out);
    const bool any = std::any_of(terms.begin(), terms.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
        node->requires_grad = true;
        node->leaf = false;
        for (const auto& t : terms) node->parents.push_back(t.node());
        node->backward_fn = [](Node& self) {
            for (auto& p : self.parents) {
                if (double* g = grad_of(*p)) {
                    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                }
            }
        };
    }
    return Tensor(std::move(node));
}

Tensor scale(const Tensor& a, double c) {
    ref(a, "scale");
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& x : out) x *= c;
    return make_result(a.shape(), std::move(out), "scale", {&a}, [c](Node& self) {
        if (double* g = grad_of(*self.parents[0])) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += c * self.grad[i];
        }
    });
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
    ref(a, "scale_by");
    ref(s, "scale_by");
    require_scalar(s, "scale_by");
    const double c = s.item();
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& x : out) x *= c;
    return make_result(a.shape(), std::move(out), "scale_by", {&a, &s}, [](Node& self) {
        Node& pa = *self.parents[0];
        Node& ps = *self.parents[1];
        const double c = ps.value[0];
        if (double* g = grad_of(pa)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += c * self.grad[i];
        }
        if (double* g = grad_of(ps)) {
            double acc = 0.0;
            for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * pa.value[i];
            g[0] += acc;
        }
    });
}

Tensor div_by(const Tensor& a, const Tensor& s) {
    ref(a, "div_by");
    ref(s, "div_by");
    require_scalar(s, "div_by");
    const double c = s.item();
    if (c == 0.0) throw NumericalError("div_by: division by zero");
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& x : out) x /= c;
    return make_result(a.shape(), std::move(out), "div_by", {&a, &s}, [](Node& self) {
        Node& pa = *self.parents[0];
        Node& ps = *self.parents[1];
        const double c = ps.value[0];
        if (double* g = grad_of(pa)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] / c;
        }
        if (double* g = grad_of(ps)) {
            double acc = 0.0;
            for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * pa.value[i];
            g[0] -= acc / (c * c);
        }
    });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
    const auto& nx = ref(x, "add_row_bias");
    const auto& nb = ref(bias, "add_row_bias");
    if (nb.shape.rows != 1 || nb.shape.cols != nx.shape.cols) {
        throw DimensionError("add_row_bias: bias " + to_string(nb.shape) + " for input " +
                             to_string(nx.shape));
    }
    const std::size_t rows = nx.shape.rows, cols = nx.shape.cols;
    std::vector<double> out = nx.value;
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += nb.value[c];
    }
    return make_result(nx.shape, std::move(out), "add_row_bias", {&x, &bias},
                       [rows, cols](Node& self) {
                           if (double* g = grad_of(*self.parents[0])) {
                               for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                           }
                           if (double* g = grad_of(*self.parents[1])) {
                               for (std::size_t r = 0; r < rows; ++r) {
                                   for (std::size_t c = 0; c < cols; ++c) g[c] += self.grad[r * cols + c];
                               }
                           }
                       });
}

Tensor sum(const Tensor& a) {
    ref(a, "sum");
    double s = 0.0;
    for (double x : a.data()) s += x;
    return make_result({1, 1}, {s}, "sum", {&a}, [](Node& self) {
        if (double* g = grad_of(*self.parents[0])) {
            const std::size_t n = self.parents[0]->value.size();
            for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
        }
    });
}

Tensor mean(const Tensor& a) {
    ref(a, "mean");
    if (a.size() == 0) throw ContractError("mean: empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor sigmoid(const Tensor& a) {
    ref(a, "sigmoid");
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& x : out) x = 1.0 / (1.0 + std::exp(-x));
    return make_result(a.shape(), std::move(out), "sigmoid", {&a}, [](Node& self) {
        if (double* g = grad_of(*self.parents[0])) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const double y = self.value[i];
                g[i] += self.grad[i] * y * (1.0 - y);
            }
        }
    });
}

Tensor exp(const Tensor& a) {
    ref(a, "exp");
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& x : out) x = std::exp(x);
    return make_result(a.shape(), std::move(out), "exp", {&a}, [](Node& self) {
        if (double* g = grad_of(*self.parents[0])) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * self.value[i];
        }
    });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& a) {
    ref(a, "gelu");
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& x : out) x = 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
    return make_result(a.shape(), std::move(out), "gelu", {&a}, [](Node& self) {
        Node& p = *self.parents[0];
        if (double* g = grad_of(p)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const double x = p.value[i];
                const double u = kGeluC * (x + kGeluA * x * x * x);
                const double th = std::tanh(u);
                const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
                const double d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
                g[i] += self.grad[i] * d;
            }
        }
    });
}

Tensor rms_norm(const Tensor& x, double eps) {
    const auto& nx = ref(x, "rms_norm");
    const std::size_t rows = nx.shape.rows, cols = nx.shape.cols;
    if (cols == 0) throw DimensionError("rms_norm: zero-width rows");
    std::vector<double> out(nx.value.size());
    std::vector<double> inv(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = nx.value.data() + r * cols;
        double ss = 0.0;
        for (std::size_t c = 0; c < cols; ++c) ss += xr[c] * xr[c];
        inv[r] = 1.0 / std::sqrt(ss / static_cast<double>(cols) + eps);
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xr[c] * inv[r];
    }
    return make_result(nx.shape, std::move(out), "rms_norm", {&x},
                       [rows, cols, inv = std::move(inv)](Node& self) {
                           Node& p = *self.parents[0];
                           double* g = grad_of(p);
                           if (!g) return;
                           for (std::size_t r = 0; r < rows; ++r) {
                               const double* xr = p.value.data() + r * cols;
                               const double* dy = self.grad.data() + r * cols;
                               double dot = 0.0;
                               for (std::size_t c = 0; c < cols; ++c) dot += dy[c] * xr[c];
                               const double ir = inv[r];
                               const double k = ir * ir * ir * dot / static_cast<double>(cols);
                               for (std::size_t c = 0; c < cols; ++c) {
                                   g[r * cols + c] += ir * dy[c] - k * xr[c];
                               }
                           }
                       });
}

Tensor gather_rows(const Tensor& table, std::span<const int> indices) {
    const auto& nt = ref(table, "gather_rows");
    const std::size_t cols = nt.shape.cols;
    std::vector<int> idx(indices.begin(), indices.end());
    std::vector<double> out(idx.size() * cols);
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= nt.shape.rows) {
            throw IndexError("gather_rows: index " + std::to_string(idx[r]) + " outside table of " +
                             std::to_string(nt.shape.rows) + " rows");
        }
        std::copy_n(nt.value.begin() + static_cast<std::ptrdiff_t>(idx[r] * cols), cols,
                    out.begin() + static_cast<std::ptrdiff_t>(r * cols));
    }
    const Shape shape{idx.size(), cols};
    return make_result(shape, std::move(out), "gather_rows", {&table},
                       [cols, idx = std::move(idx)](Node& self) {
                           if (double* g = grad_of(*self.parents[0])) {
                               for (std::size_t r = 0; r < idx.size(); ++r) {
                                   double* dst = g + static_cast<std::size_t>(idx[r]) * cols;
                                   const double* src = self.grad.data() + r * cols;
                                   for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
                               }
                           }
                       });
}

Tensor concat_rows(const Tensor& top, const Tensor& bottom) {
    const auto& a = ref(top, "concat_rows");
    const auto& b = ref(bottom, "concat_rows");
    if (a.shape.cols != b.shape.cols) {
        throw DimensionError("concat_rows: widths differ " + to_string(a.shape) + " / " +
                             to_string(b.shape));
    }
    std::vector<double> out = a.value;
    out.insert(out.end(), b.value.begin(), b.value.end());
    const std::size_t split = a.value.size();
    const Shape shape{a.shape.rows + b.shape.rows, a.shape.cols};
    return make_result(shape, std::move(out), "concat_rows", {&top, &bottom}, [split](Node& self) {
        if (double* g = grad_of(*self.parents[0])) {
            for (std::size_t i = 0; i < split; ++i) g[i] += self.grad[i];
        }
        if (double* g = grad_of(*self.parents[1])) {
            for (std::size_t i = split; i < self.grad.size(); ++i) g[i - split] += self.grad[i];
        }
    });
}

Tensor element(const Tensor& a, std::size_t index) {
    ref(a, "element");
    if (index >= a.size()) throw IndexError("element: index out of range");
    return make_result({1, 1}, {a.data()[index]}, "element", {&a}, [index](Node& self) {
        if (double* g = grad_of(*self.parents[0])) g[index] += self.grad[0];
    });
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
    const auto& nq = ref(q, "causal_attention");
    ref(k, "causal_attention");
    ref(v, "causal_attention");
    require_same_shape(q, k, "causal_attention");
    require_same_shape(q, v, "causal_attention");
    const std::size_t n = nq.shape.rows, d = nq.shape.cols;
    if (heads == 0 || d % heads != 0) {
        throw DimensionError("causal_attention: width " + std::to_string(d) +
                             " not divisible by heads " + std::to_string(heads));
    }
    const std::size_t hd = d / heads;
    const double scl = 1.0 / std::sqrt(static_cast<double>(hd));
    const auto qv = q.data(), kv = k.data(), vv = v.data();
    // probs[h][i][j], j <= i
    std::vector<double> probs(heads * n * n, 0.0);
    std::vector<double> out(n * d, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * hd;
        for (std::size_t i = 0; i < n; ++i) {
            double* pr = probs.data() + (h * n + i) * n;
            double mx = -INFINITY;
            for (std::size_t j = 0; j <= i; ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < hd; ++c) s += qv[i * d + off + c] * kv[j * d + off + c];
                pr[j] = s * scl;
                mx = std::max(mx, pr[j]);
            }
            double z = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
                pr[j] = std::exp(pr[j] - mx);
                z += pr[j];
            }
            for (std::size_t j = 0; j <= i; ++j) {
                pr[j] /= z;
                const double w = pr[j];
                for (std::size_t c = 0; c < hd; ++c) out[i * d + off + c] += w * vv[j * d + off + c];
            }
        }
    }
    return make_result(
        nq.shape, std::move(out), "causal_attention", {&q, &k, &v},
        [n, d, heads, hd, scl, probs = std::move(probs)](Node& self) {
            Node& pq = *self.parents[0];
            Node& pk = *self.parents[1];
            Node& pv = *self.parents[2];
            double* gq = grad_of(pq);
            double* gk = grad_of(pk);
            double* gv = grad_of(pv);
            const double* dout = self.grad.data();
            std::vector<double> dp(n);
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t off = h * hd;
                for (std::size_t i = 0; i < n; ++i) {
                    const double* pr = probs.data() + (h * n + i) * n;
                    double dot = 0.0;
                    for (std::size_t j = 0; j <= i; ++j) {
                        double s = 0.0;
                        for (std::size_t c = 0; c < hd; ++c) {
                            s += dout[i * d + off + c] * pv.value[j * d + off + c];
                        }
                        dp[j] = s;
                        dot += pr[j] * s;
                        if (gv) {
                            for (std::size_t c = 0; c < hd; ++c) {
                                gv[j * d + off + c] += pr[j] * dout[i * d + off + c];
                            }
                        }
                    }
                    for (std::size_t j = 0; j <= i; ++j) {
                        const double ds = pr[j] * (dp[j] - dot) * scl;
                        if (gq) {
                            for (std::size_t c = 0; c < hd; ++c) {
                                gq[i * d + off + c] += ds * pk.value[j * d + off + c];
                            }
                        }
                        if (gk) {
                            for (std::size_t c = 0; c < hd; ++c) {
                                gk[j * d + off + c] += ds * pq.value[i * d + off + c];
                            }
                        }
                    }
                }
            }
        });
}

Tensor cosine_sim(const Tensor& a, const Tensor& b) {
    ref(a, "cosine_sim");
    ref(b, "cosine_sim");
    if (a.size() != b.size()) {
        throw DimensionError("cosine_sim: lengths differ " + to_string(a.shape()) + " vs " +
                             to_string(b.shape()));
    }
    const auto av = a.data(), bv = b.data();
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        dot += av[i] * bv[i];
        na += av[i] * av[i];
        nb += bv[i] * bv[i];
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    if (na <= kNormEpsilon || nb <= kNormEpsilon) {
        throw DegenerateInputError("cosine_sim: zero-norm input");
    }
    const double c = std::clamp(dot / (na * nb), -1.0, 1.0);
    return make_result({1, 1}, {c}, "cosine_sim", {&a, &b}, [na, nb, c](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        const double g = self.grad[0];
        if (double* ga = grad_of(pa)) {
            for (std::size_t i = 0; i < pa.value.size(); ++i) {
                ga[i] += g * (pb.value[i] / (na * nb) - c * pa.value[i] / (na * na));
            }
        }
        if (double* gb = grad_of(pb)) {
            for (std::size_t i = 0; i < pb.value.size(); ++i) {
                gb[i] += g * (pa.value[i] / (na * nb) - c * pb.value[i] / (nb * nb));
            }
        }
    });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets) {
    const auto& nl = ref(logits, "softmax_cross_entropy");
    const std::size_t n = nl.shape.rows, vocab = nl.shape.cols;
    if (targets.size() != n) {
        throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                             " targets for " + std::to_string(n) + " rows");
    }
    std::vector<int> tgt(targets.begin(), targets.end());
    std::size_t counted = 0;
    for (int t : tgt) {
        if (t == kIgnoreTarget) continue;
        if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
            throw IndexError("softmax_cross_entropy: target " + std::to_string(t) +
                             " outside vocabulary of " + std::to_string(vocab));
        }
        ++counted;
    }
    if (counted == 0) throw ContractError("softmax_cross_entropy: every target is ignored");
    std::vector<double> probs(n * vocab);
    double loss = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        const double* row = nl.value.data() + r * vocab;
        double* pr = probs.data() + r * vocab;
        const double mx = *std::max_element(row, row + vocab);
        double z = 0.0;
        for (std::size_t c = 0; c < vocab; ++c) {
            pr[c] = std::exp(row[c] - mx);
            z += pr[c];
        }
        for (std::size_t c = 0; c < vocab; ++c) pr[c] /= z;
        if (tgt[r] != kIgnoreTarget) loss += -(row[tgt[r]] - mx - std::log(z));
    }
    const double inv = 1.0 / static_cast<double>(counted);
    loss *= inv;
    return make_result({1, 1}, {loss}, "softmax_cross_entropy", {&logits},
                       [vocab, inv, tgt = std::move(tgt), probs = std::move(probs)](Node& self) {
                           double* g = grad_of(*self.parents[0]);
                           if (!g) return;
                           const double up = self.grad[0] * inv;
                           for (std::size_t r = 0; r < tgt.size(); ++r) {
                               if (tgt[r] == kIgnoreTarget) continue;
                               const double* pr = probs.data() + r * vocab;
                               double* gr = g + r * vocab;
                               for (std::size_t c = 0; c < vocab; ++c) gr[c] += up * pr[c];
                               gr[tgt[r]] -= up;
                           }
                       });
}

Tensor stop_gradient(const Tensor& t) {
    const auto& n = ref(t, "stop_gradient");
    return Tensor::from(n.shape, n.value, false);
}

void backward(const Tensor& loss) {
    const auto& root = ref(loss, "backward");
    if (root.shape != Shape{1, 1}) {
        throw ContractError("backward: loss must be a scalar, got " + to_string(root.shape));
    }
    if (!root.requires_grad) throw ContractError("backward: loss is not on a recorded graph");

    // Iterative post-order DFS over interior nodes.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    Node* start = loss.node().get();
    if (!start->leaf) {
        stack.emplace_back(start, 0);
        seen.insert(start);
    }
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (!p->leaf && p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (Node* n : order) n->grad.assign(n->value.size(), 0.0);
    if (start->leaf) {
        if (start->grad.empty()) start->grad.assign(1, 0.0);
        start->grad[0] += 1.0;
        return;
    }
    start->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) (*it)->backward_fn(**it);
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& t,
                        double h) {
    if (!(h > 0.0)) throw ContractError("finite_diff_grad: step must be positive");
    Tensor probe = t.clone(t.requires_grad());
    auto values = probe.mutable_data();
    std::vector<double> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double orig = values[i];
        values[i] = orig + h;
        const double fp = f(probe);
        values[i] = orig - h;
        const double fm = f(probe);
        values[i] = orig;
        out[i] = (fp - fm) / (2.0 * h);
    }
    return Tensor::from(t.shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// Registry and optimizers

namespace {
auto find_entry(std::vector<ParamRegistry::Entry>& v, const std::string& name) {
    return std::find_if(v.begin(), v.end(), [&](const auto& e) { return e.name == name; });
}
}  // namespace

void ParamRegistry::insert(std::vector<Entry>& into, Entry e) {
    auto rank = [&](const std::string& n) {
        return std::find(registered_.begin(), registered_.end(), n) - registered_.begin();
    };
    const auto r = rank(e.name);
    auto pos = std::find_if(into.begin(), into.end(), [&](const Entry& x) { return rank(x.name) > r; });
    into.insert(pos, std::move(e));
}

void ParamRegistry::add_trainable(std::string name, Tensor t) {
    if (contains(name)) throw ContractError("registry: duplicate parameter '" + name + "'");
    t.set_requires_grad(true);
    registered_.push_back(name);
    trainable_.push_back({std::move(name), std::move(t)});
}

void ParamRegistry::add_frozen(std::string name, Tensor t) {
    if (contains(name)) throw ContractError("registry: duplicate parameter '" + name + "'");
    t.set_requires_grad(false);
    t.drop_grad();
    registered_.push_back(name);
    frozen_.push_back({std::move(name), std::move(t)});
}

void ParamRegistry::freeze(const std::string& name) {
    auto it = find_entry(trainable_, name);
    if (it == trainable_.end()) throw ContractError("registry: '" + name + "' is not trainable");
    Entry e = std::move(*it);
    trainable_.erase(it);
    e.tensor.set_requires_grad(false);
    e.tensor.drop_grad();
    insert(frozen_, std::move(e));
}

void ParamRegistry::unfreeze(const std::string& name) {
    auto it = find_entry(frozen_, name);
    if (it == frozen_.end()) throw ContractError("registry: '" + name + "' is not frozen");
    Entry e = std::move(*it);
    frozen_.erase(it);
    e.tensor.set_requires_grad(true);
    insert(trainable_, std::move(e));
}

void ParamRegistry::unfreeze_all() {
    while (!frozen_.empty()) unfreeze(frozen_.front().name);
}

std::size_t ParamRegistry::trainable_count() const {
    std::size_t n = 0;
    for (const auto& e : trainable_) n += e.tensor.size();
    return n;
}

bool ParamRegistry::contains(const std::string& name) const {
    auto pred = [&](const Entry& e) { return e.name == name; };
    return std::any_of(trainable_.begin(), trainable_.end(), pred) ||
           std::any_of(frozen_.begin(), frozen_.end(), pred);
}

Tensor ParamRegistry::get(const std::string& name) const {
    for (const auto* v : {&trainable_, &frozen_}) {
        for (const auto& e : *v) {
            if (e.name == name) return e.tensor;
        }
    }
    throw ContractError("registry: unknown parameter '" + name + "'");
}

void ParamRegistry::zero_grad() {
    for (auto& e : trainable_) e.tensor.zero_grad();
}

void LrSchedule::validate() const {
    if (!(base_lr >= 0.0)) throw ConfigError("lr schedule: base_lr must be non-negative");
    if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) {
        throw ConfigError("lr schedule: warmup_ratio must lie in [0, 1)");
    }
    if (total_steps == 0) throw ConfigError("lr schedule: total_steps must be positive");
}

std::size_t LrSchedule::warmup_steps() const {
    return static_cast<std::size_t>(warmup_ratio * static_cast<double>(total_steps));
}

double LrSchedule::lr(std::size_t step) const {
    const std::size_t warm = warmup_steps();
    if (step < warm) return base_lr * static_cast<double>(step) / static_cast<double>(warm);
    if (step >= total_steps) return 0.0;
    const double progress =
        static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void sgd_step(ParamRegistry& registry, const LrSchedule& schedule, std::size_t step) {
    Optimizer opt({OptimizerKind::sgd});
    opt.step(registry, schedule.lr(step));
}

void Optimizer::reset() {
    t_ = 0;
    m_.clear();
    v_.clear();
}

void Optimizer::step(ParamRegistry& registry, double lr) {
    auto& params = registry.trainable();
    for (const auto& e : params) {
        if (!e.tensor.has_grad()) {
            throw ContractError("optimizer: trainable parameter '" + e.name + "' has no gradient");
        }
    }
    const bool stateful =
        config_.kind == OptimizerKind::adam || config_.momentum != 0.0;
    if (stateful && m_.size() != params.size()) {
        m_.assign(params.size(), {});
        v_.assign(params.size(), {});
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i].assign(params[i].tensor.size(), 0.0);
            if (config_.kind == OptimizerKind::adam) v_[i].assign(params[i].tensor.size(), 0.0);
        }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor p = params[i].tensor;
        auto w = p.mutable_data();
        auto g = p.mutable_grad();
        switch (config_.kind) {
            case OptimizerKind::sgd:
                if (config_.momentum != 0.0) {
                    auto& m = m_[i];
                    for (std::size_t j = 0; j < w.size(); ++j) {
                        m[j] = config_.momentum * m[j] + g[j];
                        w[j] -= lr * m[j];
                    }
                } else {
                    for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr * g[j];
                }
                break;
            case OptimizerKind::adam: {
                auto& m = m_[i];
                auto& v = v_[i];
                for (std::size_t j = 0; j < w.size(); ++j) {
                    m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
                    v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
                    w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + config_.eps);
                }
                break;
            }
        }
        std::fill(g.begin(), g.end(), 0.0);
    }
}

std::string to_string(OptimizerKind k) {
    return k == OptimizerKind::sgd ? "sgd" : "adam";
}

OptimizerKind optimizer_kind_from_string(const std::string& s) {
    if (s == "sgd") return OptimizerKind::sgd;
    if (s == "adam") return OptimizerKind::adam;
    throw ConfigError("unknown optimizer '" + s + "'");
}

}  // namespace dualinc::ad
