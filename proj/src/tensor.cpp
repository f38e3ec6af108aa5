#include "mrdetr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace mrdetr::ad {

namespace {

thread_local std::uint64_t g_next_id = 1;
thread_local bool g_grad_enabled = true;
thread_local bool g_strict = false;
thread_local OpKind g_fault = OpKind::Leaf;
thread_local std::uint64_t* g_mac_sink = nullptr;

}  // namespace

const char* op_name(OpKind kind) {
    switch (kind) {
        case OpKind::Leaf: return "leaf";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul";
        case OpKind::Div: return "div";
        case OpKind::Scale: return "scale";
        case OpKind::AddScalar: return "add_scalar";
        case OpKind::Exp: return "exp";
        case OpKind::Log: return "log";
        case OpKind::Pow: return "pow";
        case OpKind::Sqrt: return "sqrt";
        case OpKind::Sigmoid: return "sigmoid";
        case OpKind::Softplus: return "softplus";
        case OpKind::Relu: return "relu";
        case OpKind::Abs: return "abs";
        case OpKind::Maximum: return "maximum";
        case OpKind::Minimum: return "minimum";
        case OpKind::Clamp: return "clamp";
        case OpKind::Softmax: return "softmax";
        case OpKind::LayerNorm: return "layer_norm";
        case OpKind::MatMul: return "matmul";
        case OpKind::Transpose: return "transpose";
        case OpKind::Reshape: return "reshape";
        case OpKind::Concat: return "concat";
        case OpKind::Slice: return "slice";
        case OpKind::Sum: return "sum";
        case OpKind::Mean: return "mean";
        case OpKind::MaskedFill: return "masked_fill";
        case OpKind::Take: return "take";
        case OpKind::IndexAddRows: return "index_add_rows";
    }
    return "unknown";
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

void Node::ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
}

Tensor Tensor::leaf(Shape shape, std::vector<double> values, bool requires_grad) {
    for (auto e : shape)
        if (e == 0) throw ShapeError("leaf: zero extent in shape " + shape_str(shape));
    if (numel(shape) != values.size())
        throw ShapeError("leaf: shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->kind = OpKind::Leaf;
    n->id = detail::next_id();
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    const auto n = numel(shape);
    return leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
    const auto n = numel(shape);
    return leaf(std::move(shape), std::vector<double>(n, v), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) { return leaf({}, {v}, requires_grad); }

double Tensor::item() const {
    if (node_->value.size() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not scalar");
    return node_->value[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
    if (rank() != 2) throw ShapeError("at(r,c) on rank-" + std::to_string(rank()) + " tensor");
    return node_->value.at(r * node_->shape[1] + c);
}

std::vector<double> Tensor::grad() const {
    if (node_->grad.empty()) return std::vector<double>(node_->value.size(), 0.0);
    return node_->grad;
}

Tensor Tensor::detach() const { return leaf(node_->shape, node_->value, false); }

void backward(const Tensor& loss) {
    if (!loss.defined()) throw std::invalid_argument("backward: undefined loss");
    if (loss.size() != 1 || loss.rank() != 0)
        throw ShapeError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{loss.node().get()};
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        if (!seen.insert(n).second) continue;
        order.push_back(n);
        for (auto& in : n->inputs)
            if (in->requires_grad) stack.push_back(in.get());
    }
    std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->id > b->id; });

    for (Node* n : order)
        if (n->kind != OpKind::Leaf) n->grad.assign(n->value.size(), 0.0);
    Node* root = loss.node().get();
    root->ensure_grad();
    root->grad[0] += 1.0;

    for (Node* n : order) {
        if (n->kind == OpKind::Leaf || !n->backward) continue;
        if (n->kind == g_fault)
            for (auto& g : n->grad) g = -g;
        if (g_strict)
            for (double g : n->grad)
                if (!std::isfinite(g))
                    throw NumericError(std::string("backward: non-finite gradient at ") + op_name(n->kind) +
                                       " node " + std::to_string(n->id));
        n->backward(*n);
    }
    if (g_strict)
        for (Node* n : order)
            if (n->kind == OpKind::Leaf)
                for (double g : n->grad)
                    if (!std::isfinite(g))
                        throw NumericError("backward: non-finite gradient at leaf node " + std::to_string(n->id));
    // Interior grads are only needed during the sweep.
    for (Node* n : order)
        if (n->kind != OpKind::Leaf) {
            n->grad.clear();
            n->grad.shrink_to_fit();
        }
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

void set_strict(bool on) { g_strict = on; }
bool strict() { return g_strict; }
void set_fault_injection(OpKind kind) { g_fault = kind; }

MacCounter::MacCounter() : prev_(g_mac_sink) { g_mac_sink = &count_; }
MacCounter::~MacCounter() {
    g_mac_sink = prev_;
    if (prev_) *prev_ += count_;
}
std::uint64_t MacCounter::count() const { return count_; }

namespace detail {

std::uint64_t next_id() { return g_next_id++; }

void count_macs(std::uint64_t n) {
    if (g_mac_sink) *g_mac_sink += n;
}

void check_finite(OpKind kind, std::span<const double> v) {
    for (double x : v)
        if (!std::isfinite(x)) throw NumericError(std::string(op_name(kind)) + ": non-finite input");
}

Tensor make_result(OpKind kind, Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                   std::function<void(Node&)> rule) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->kind = kind;
    n->id = next_id();
    bool req = false;
    if (g_grad_enabled)
        for (auto& t : inputs) req = req || t.requires_grad();
    n->requires_grad = req;
    if (req) {
        n->inputs.reserve(inputs.size());
        for (auto& t : inputs) n->inputs.push_back(t.node());
        n->backward = std::move(rule);
    }
    return Tensor(std::move(n));
}

}  // namespace detail

}  // namespace mrdetr::ad
