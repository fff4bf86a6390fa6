#include "cspr/tensor.hpp"

#include <algorithm>
#include <unordered_set>

namespace cspr::ad {

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

std::vector<real>& ensure_grad(Node& n) {
    if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, real v, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value.assign(shape_numel(shape), v);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::from(Shape shape, std::vector<real> values, bool requires_grad) {
    if (shape_numel(shape) != values.size())
        throw ShapeError("tensor data length " + std::to_string(values.size()) + " does not match shape " +
                         shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::scalar(real v, bool requires_grad) {
    return from({1}, {v}, requires_grad);
}

real Tensor::item() const {
    if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    return n_->value[0];
}

std::span<const real> Tensor::grad() const {
    return n_->grad;
}

void Tensor::zero_grad() {
    n_->grad.assign(n_->value.size(), 0.0);
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() {
    return g_grad_enabled;
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) {
    g_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() {
    g_grad_enabled = prev_;
}

Tensor make_op(Shape shape, std::vector<real> value, std::vector<Tensor> parents,
               std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    if (shape_numel(shape) != value.size())
        throw ShapeError("op output length does not match shape " + shape_str(shape));
    n->shape = std::move(shape);
    n->value = std::move(value);
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& p : parents)
            if (p.defined() && p.requires_grad()) needs = true;
    }
    if (needs) {
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (const auto& p : parents) n->parents.push_back(p.node());
        n->backprop = std::move(backprop);
    }
    return Tensor::wrap(std::move(n));
}

BackwardStats backward(const Tensor& root) {
    if (!root.defined()) throw ContractError("backward on undefined tensor");
    if (root.size() != 1) throw ContractError("backward root must be scalar, got " + shape_str(root.shape()));
    BackwardStats stats;
    if (!root.requires_grad()) return stats;  // nothing in the graph needs gradients

    // Iterative postorder over the requires_grad subgraph.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    struct Frame {
        Node* n;
        std::size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({root.node().get(), 0});
    visited.insert(root.node().get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            Node* p = f.n->parents[f.next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    ensure_grad(*root.node())[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop) {
            ensure_grad(*n);
            n->backprop(*n);
        }
    }
    return stats;
}

GradResult forward_backward(const Tensor& root, std::span<const Tensor> wrt) {
    for (const Tensor& w : wrt) {
        if (!w.defined()) throw ContractError("forward_backward: undefined wrt tensor");
        const_cast<Tensor&>(w).zero_grad();
    }
    backward(root);

    // Membership check: a wrt node the sweep never reached keeps an all-zero
    // grad buffer; distinguish "participated with zero grad" from "absent"
    // by re-walking reachability.
    std::unordered_set<const Node*> reachable;
    {
        std::vector<const Node*> stack{root.node().get()};
        while (!stack.empty()) {
            const Node* n = stack.back();
            stack.pop_back();
            if (!reachable.insert(n).second) continue;
            for (const auto& p : n->parents) stack.push_back(p.get());
        }
    }

    GradResult out;
    out.grads.reserve(wrt.size());
    for (const Tensor& w : wrt) {
        if (!reachable.count(w.node().get())) out.missing_wrt = true;
        std::vector<real> g(w.grad().begin(), w.grad().end());
        if (g.empty()) g.assign(w.size(), 0.0);
        out.grads.push_back(Tensor::from(w.shape(), std::move(g)));
    }
    return out;
}

}  // namespace cspr::ad
