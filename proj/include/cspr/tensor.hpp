#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cspr/common.hpp"

namespace cspr::ad {

// All graph arithmetic runs in double so that central finite differences are
// a usable oracle; file formats narrow to f32 at the boundary.
using real = double;
using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Node {
    Shape shape;
    std::vector<real> value;
    bool requires_grad = false;
    std::vector<real> grad;  // sized lazily; same length as value when present
    std::vector<std::shared_ptr<Node>> parents;
    // Distributes this node's grad into its parents' grad buffers.
    std::function<void(Node&)> backprop;
};

std::vector<real>& ensure_grad(Node& n);

// Value-semantics handle onto a graph node. Tensors are immutable once
// created; mutable_data exists for parameter init, optimizer updates and
// finite-difference probing of leaves.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, real v, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<real> values, bool requires_grad = false);
    static Tensor scalar(real v, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    std::size_t rank() const { return n_->shape.size(); }
    std::size_t dim(std::size_t i) const { return n_->shape[i]; }
    std::size_t size() const { return n_->value.size(); }

    std::span<const real> data() const { return n_->value; }
    std::span<real> mutable_data() { return n_->value; }
    real at(std::size_t i) const { return n_->value[i]; }
    real item() const;

    bool requires_grad() const { return n_->requires_grad; }
    bool has_grad() const { return !n_->grad.empty(); }
    std::span<const real> grad() const;
    void zero_grad();

    std::shared_ptr<Node> node() const { return n_; }
    static Tensor wrap(std::shared_ptr<Node> n) { return Tensor(std::move(n)); }

  private:
    explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}
    std::shared_ptr<Node> n_;
};

// Thread-local gate: while disabled, ops produce constant tensors with no
// graph edges. Forward-only evaluation (database embedding, mining) runs
// inside this guard so worker threads never touch shared autograd state.
bool grad_enabled();

class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

// Factory for differentiable ops (used by the sparse-conv engine and any
// composite that wants a fused backward rule).
Tensor make_op(Shape shape, std::vector<real> value, std::vector<Tensor> parents,
               std::function<void(Node&)> backprop);

struct BackwardStats {
    // Set when a requested wrt tensor did not participate in the graph.
    bool missing_wrt = false;
};

// Reverse-mode sweep from a scalar root. Accumulates into .grad of every
// reachable requires_grad node (sum semantics over fan-out).
BackwardStats backward(const Tensor& root);

// Convenience wrapper: zeroes the wrt grads, runs backward, and returns a
// fresh gradient tensor per wrt entry. wrt tensors absent from the graph get
// a zero gradient and flip missing_wrt.
struct GradResult {
    std::vector<Tensor> grads;
    bool missing_wrt = false;
};
GradResult forward_backward(const Tensor& root, std::span<const Tensor> wrt);

}  // namespace cspr::ad
