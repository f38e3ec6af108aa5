#pragma once

// Dense double-precision tensors with a reverse-mode tape.
//
// Every op result holds shared references to its inputs plus a derivative
// rule. Node ids increase monotonically per thread, so sorting reachable
// nodes by descending id yields a valid reverse topological order.
//
// Accumulation semantics: backward() adds into leaf gradients. Calling it
// twice without zero_grad() doubles leaf gradients. Intermediate node
// gradients are cleared at the start of each backward() call.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mrdetr::ad {

using Shape = std::vector<std::size_t>;

enum class OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    Exp,
    Log,
    Pow,
    Sqrt,
    Sigmoid,
    Softplus,
    Relu,
    Abs,
    Maximum,
    Minimum,
    Clamp,
    Softmax,
    LayerNorm,
    MatMul,
    Transpose,
    Reshape,
    Concat,
    Slice,
    Sum,
    Mean,
    MaskedFill,
    Take,
    IndexAddRows,
};

const char* op_name(OpKind kind);

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::string shape_str(const Shape& s);
std::size_t numel(const Shape& s);

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first accumulation
    OpKind kind = OpKind::Leaf;
    std::uint64_t id = 0;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    void ensure_grad();
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Tensor leaf(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double v, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->value.size(); }

    std::span<const double> values() const { return node_->value; }
    std::span<double> mutable_values() { return node_->value; }
    double item() const;
    double at(std::size_t flat) const { return node_->value.at(flat); }
    double at(std::size_t r, std::size_t c) const;

    // Gradient as a same-shape vector; exact zeros when never reached.
    std::vector<double> grad() const;
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad() { node_->grad.clear(); }

    bool requires_grad() const { return node_->requires_grad; }
    OpKind kind() const { return node_->kind; }
    std::uint64_t tape_id() const { return node_->id; }

    // Leaf copy sharing no history.
    Tensor detach() const;

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

// Runs reverse accumulation from a scalar loss into every reachable leaf.
void backward(const Tensor& loss);

// Disables tape recording on this thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_enabled();

// Strict mode rejects non-finite op inputs and non-finite gradients.
void set_strict(bool on);
bool strict();

// Test hook: negates the upstream gradient of every node of this kind during
// backward(). Pass OpKind::Leaf to disable.
void set_fault_injection(OpKind kind);

// Multiply-accumulate counter fed by matmul on this thread.
class MacCounter {
public:
    MacCounter();
    ~MacCounter();
    MacCounter(const MacCounter&) = delete;
    MacCounter& operator=(const MacCounter&) = delete;
    std::uint64_t count() const;

private:
    std::uint64_t* prev_;
    std::uint64_t count_ = 0;
};

namespace detail {
std::uint64_t next_id();
void count_macs(std::uint64_t n);
Tensor make_result(OpKind kind, Shape shape, std::vector<double> value,
                   std::vector<Tensor> inputs, std::function<void(Node&)> rule);
void check_finite(OpKind kind, std::span<const double> v);
}  // namespace detail

}  // namespace mrdetr::ad
