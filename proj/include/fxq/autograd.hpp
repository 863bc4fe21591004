#pragma once

// Reverse-mode differentiation.
//
// Every differentiable op produces a Var whose node remembers its inputs and a
// backward rule. backward(loss) visits the graph in reverse topological order
// and accumulates into the `grad` buffers of everything that requires it.
// Parameter gradients keep accumulating until zero_grad(); a given loss can be
// back-propagated only once.

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fxq/errors.hpp"
#include "fxq/tensor.hpp"

namespace fxq {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first use
  bool requires_grad = false;
  bool backward_done = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Node() = default;
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  // Releases long parent chains without recursing.
  ~Node() {
    std::vector<std::shared_ptr<Node>> pending = std::move(parents);
    while (!pending.empty()) {
      std::shared_ptr<Node> p = std::move(pending.back());
      pending.pop_back();
      if (p.use_count() == 1) {
        for (auto& q : p->parents) pending.push_back(std::move(q));
        p->parents.clear();
      }
    }
  }

  Tensor<T>& grad_buffer() {
    if (grad.size() != value.size() || grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
  bool has_grad() const { return !grad.empty() || value.empty(); }
};

template <typename T>
class Var {
 public:
  Var() = default;

  static Var constant(Tensor<T> value) { return Var(std::move(value), false); }
  static Var parameter(Tensor<T> value) { return Var(std::move(value), true); }

  bool defined() const noexcept { return node_ != nullptr; }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& grad_buffer() { return node_->grad_buffer(); }
  void zero_grad() {
    if (node_) node_->grad = Tensor<T>();
  }

  const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

  /// Result of an op. Records `fn` only when some input needs a gradient.
  static Var from_op(Tensor<T> value, std::vector<Var> inputs, std::function<void(Node<T>&)> fn) {
    Var out(std::move(value), false);
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    out.node_->parents.reserve(inputs.size());
    for (auto& in : inputs) out.node_->parents.push_back(in.node_);
    out.node_->backward_fn = std::move(fn);
    return out;
  }

 private:
  Var(Tensor<T> value, bool requires_grad) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  std::shared_ptr<Node<T>> node_;
};

/// Gradient sink of the i-th input of `self`, or nullptr if it needs none.
template <typename T>
Tensor<T>* input_grad(Node<T>& self, std::size_t i) {
  auto& p = self.parents[i];
  return p->requires_grad ? &p->grad_buffer() : nullptr;
}

template <typename T>
void backward(const Var<T>& loss) {
  if (!loss.defined()) throw ContractError("backward on an undefined value");
  auto root = loss.node();
  if (root->value.size() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + shape_string(root->value.shape()));
  }
  if (root->backward_done) throw ContractError("backward called twice on the same loss");
  if (!root->requires_grad) throw ContractError("loss does not depend on any parameter");

  // Iterative post-order DFS.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buffer().fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  root->backward_done = true;
}

}  // namespace fxq
