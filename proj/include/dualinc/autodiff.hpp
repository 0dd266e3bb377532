#pragma once

// Dense 2-D reverse-mode automatic differentiation.
//
// A Tensor is a shared handle onto a graph node. Ops record their parents and
// a backward closure only when some input requires a gradient, so frozen
// inference paths build no graph at all. The tape is rebuilt every step.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dualinc::ad {

struct Shape {
    std::size_t rows = 0;
    std::size_t cols = 0;

    std::size_t size() const noexcept { return rows * cols; }
    bool operator==(const Shape&) const = default;
};

std::string to_string(const Shape& s);

namespace detail {
struct Node;
}

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor row(std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rows() const { return shape().rows; }
    std::size_t cols() const { return shape().cols; }
    std::size_t size() const { return shape().size(); }

    std::span<const double> data() const;
    // Writable view for leaves (parameters, inputs). Mutating a tensor that is
    // part of a live graph invalidates that graph's gradients.
    std::span<double> mutable_data();
    double item() const;
    double at(std::size_t r, std::size_t c) const;

    bool requires_grad() const;
    void set_requires_grad(bool on);
    bool is_leaf() const;

    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    // Allocates (if needed) and zero-fills the gradient buffer.
    void zero_grad();
    void drop_grad();

    // Deep copy of the value as a new leaf; never shares storage.
    Tensor clone(bool requires_grad = false) const;

    bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }

    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

// ---------------------------------------------------------------------------
// Ops. All inputs must be finite; a non-finite result raises NumericalError.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_n(std::span<const Tensor> terms);
Tensor scale(const Tensor& a, double c);
// s must be 1x1.
Tensor scale_by(const Tensor& a, const Tensor& s);
Tensor div_by(const Tensor& a, const Tensor& s);
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor rms_norm(const Tensor& x, double eps = 1e-6);
Tensor gather_rows(const Tensor& table, std::span<const int> indices);
Tensor concat_rows(const Tensor& top, const Tensor& bottom);
// 1x1 view of the flat element at index.
Tensor element(const Tensor& a, std::size_t index);
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads);

inline constexpr double kNormEpsilon = 1e-12;

// Cosine similarity of two equally sized tensors (flattened). Both norms must
// exceed kNormEpsilon.
Tensor cosine_sim(const Tensor& a, const Tensor& b);

inline constexpr int kIgnoreTarget = -1;

// Mean over non-ignored rows of -log softmax(logits)[target].
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets);

// Identity forward, zero gradient backward.
Tensor stop_gradient(const Tensor& t);

// Populates gradients of every ancestor that requires one. Leaf gradients
// accumulate across calls; interior gradients are recomputed each call.
void backward(const Tensor& loss);

// Central differences, perturbing a private copy of t.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& t,
                        double h = 1e-5);

// ---------------------------------------------------------------------------

class ParamRegistry {
public:
    struct Entry {
        std::string name;
        Tensor tensor;
    };

    void add_trainable(std::string name, Tensor t);
    void add_frozen(std::string name, Tensor t);
    // Moves an entry between the two sets, keeping registration order.
    void freeze(const std::string& name);
    void unfreeze(const std::string& name);
    void unfreeze_all();

    const std::vector<Entry>& trainable() const noexcept { return trainable_; }
    const std::vector<Entry>& frozen() const noexcept { return frozen_; }
    std::size_t trainable_count() const;
    bool contains(const std::string& name) const;
    Tensor get(const std::string& name) const;

    void zero_grad();

private:
    void insert(std::vector<Entry>& into, Entry e);

    std::vector<Entry> trainable_;
    std::vector<Entry> frozen_;
    std::vector<std::string> registered_;  // every name, in registration order
};

struct LrSchedule {
    double base_lr = 1e-2;
    double warmup_ratio = 0.03;
    std::size_t total_steps = 1;

    void validate() const;
    std::size_t warmup_steps() const;
    double lr(std::size_t step) const;
};

enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::sgd;
    double momentum = 0.0;  // sgd only
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    bool operator==(const OptimizerConfig&) const = default;
};

// p <- p - lr(step) * grad(p) for every trainable entry, then zero grads.
void sgd_step(ParamRegistry& registry, const LrSchedule& schedule, std::size_t step);

// Stateful optimizer over a fixed registry layout.
class Optimizer {
public:
    explicit Optimizer(OptimizerConfig config = {}) : config_(config) {}

    void step(ParamRegistry& registry, double lr);
    void reset();
    const OptimizerConfig& config() const noexcept { return config_; }

private:
    OptimizerConfig config_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

std::string to_string(OptimizerKind k);
OptimizerKind optimizer_kind_from_string(const std::string& s);

}  // namespace dualinc::ad
