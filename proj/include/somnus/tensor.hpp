#pragma once
// Reverse-mode autodiff on dense double tensors. The graph is a DAG of
// shared_ptr nodes; every op validates shapes, checks its output for
// non-finite values, and registers a closure that scatters the node's
// gradient into its parents. Reductions run in fixed index order, so a given
// graph always produces bit-identical gradients.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>
#include <vector>

#include "somnus/common.hpp"

namespace somnus {

using Index = std::size_t;
using Shape = std::vector<Index>;

inline Index shape_numel(const Shape& s) {
    Index n = 1;
    for (Index d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backward;
    const char* op = "leaf";
    bool requires_grad = false;

    Index numel() const { return value.size(); }

    std::vector<double>& grad_buf() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

using NodePtr = std::shared_ptr<Node>;

namespace detail {

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

inline void check_finite(const char* op, const std::vector<double>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i])) {
            std::ostringstream os;
            os << "op '" << op << "' produced non-finite value at flat index " << i;
            throw NumericError(os.str());
        }
    }
}

}  // namespace detail

// RAII guard that disables graph construction (inference mode). Ops still
// validate and finite-check, but record no parents and no closures.
struct NoGrad {
    bool prev;
    NoGrad() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGrad() { detail::grad_mode() = prev; }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : node_(std::move(n)) {}

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size())
            throw ShapeError("tensor data size " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        detail::check_finite("leaf", data);
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad && detail::grad_mode();
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<double> d(shape_numel(shape), 0.0);
        return from(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        std::vector<double> d(shape_numel(shape), v);
        return from(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from(Shape{}, {v}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(node_); }
    const NodePtr& node() const { return node_; }
    const Shape& shape() const { return node_->shape; }
    Index rank() const { return node_->shape.size(); }
    Index numel() const { return node_->value.size(); }
    Index dim(Index i) const { return node_->shape.at(i); }
    bool requires_grad() const { return node_->requires_grad; }
    const char* op() const { return node_->op; }

    const std::vector<double>& values() const { return node_->value; }
    std::vector<double>& mutable_values() { return node_->value; }
    const std::vector<double>& grad() const { return node_->grad; }

    double item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }

    void zero_grad() const { node_->grad.assign(node_->value.size(), 0.0); }

    // Reverse pass from a scalar root. Gradients accumulate into every
    // reachable node that requires grad; leaves keep theirs until zero_grad.
    void backward() const {
        if (numel() != 1)
            throw ShapeError("backward() requires a scalar root, got " + shape_str(shape()));
        if (!node_->requires_grad)
            throw Error("backward() on a graph with no differentiable inputs");

        std::vector<Node*> order;
        std::unordered_set<Node*> seen;
        struct Frame { Node* n; std::size_t next; };
        std::vector<Frame> stack;
        stack.push_back({node_.get(), 0});
        seen.insert(node_.get());
        while (!stack.empty()) {
            Frame& f = stack.back();
            if (f.next < f.n->parents.size()) {
                Node* p = f.n->parents[f.next++].get();
                if (p->requires_grad && seen.insert(p).second)
                    stack.push_back({p, 0});
            } else {
                order.push_back(f.n);
                stack.pop_back();
            }
        }
        for (Node* n : order)
            if (n->parents.size() || n->backward) n->grad_buf();
        node_->grad_buf()[0] += 1.0;
        for (auto it = order.rbegin(); it != order.rend(); ++it)
            if ((*it)->backward) (*it)->backward();
    }

private:
    NodePtr node_;
};

namespace detail {

// Builds the output node for an op. Parents and the closure are only kept
// when grad mode is on and at least one parent participates in the graph.
inline Tensor make_node(const char* op, Shape shape, std::vector<double> value,
                        std::initializer_list<Tensor> parents) {
    check_finite(op, value);
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    if (grad_mode()) {
        bool rg = false;
        for (const auto& p : parents) rg = rg || p.node()->requires_grad;
        if (rg) {
            n->requires_grad = true;
            n->parents.reserve(parents.size());
            for (const auto& p : parents) n->parents.push_back(p.node());
        }
    }
    return Tensor(std::move(n));
}

inline void add_into(std::vector<double>& dst, const std::vector<double>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

}  // namespace somnus
