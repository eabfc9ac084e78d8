#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "polytrace/tensor.hpp"

namespace polytrace::ag {

// Dynamic tape: ops append nodes whose closures scatter gradients into their
// parents. Nodes that cannot reach a parameter carry no closure and no
// parent list, so detached subgraphs cost nothing on the backward pass.
template <class R>
struct Node {
  Tensor<R> value;
  Tensor<R> grad;
  bool requires_grad = false;
  bool grad_alloc = false;
  std::vector<std::shared_ptr<Node<R>>> parents;
  std::function<void(Node<R>&)> backward_fn;

  Node() = default;
  explicit Node(Tensor<R> v) : value(std::move(v)) {}
};

template <class R>
using Var = std::shared_ptr<Node<R>>;

template <class R>
Var<R> leaf(Tensor<R> v, bool requires_grad = false) {
  auto n = std::make_shared<Node<R>>(std::move(v));
  n->requires_grad = requires_grad;
  return n;
}

template <class R>
Var<R> constant(Tensor<R> v) {
  return leaf<R>(std::move(v), false);
}

template <class R>
Var<R> detach(const Var<R>& x) {
  return leaf<R>(x->value, false);
}

template <class R>
Tensor<R>& grad_of(const Var<R>& v) {
  if (!v->grad_alloc) {
    v->grad = Tensor<R>::zeros(v->value.shape);
    v->grad_alloc = true;
  }
  return v->grad;
}

template <class R>
void clear_grad(const Var<R>& v) {
  v->grad = Tensor<R>();
  v->grad_alloc = false;
}

template <class R>
bool any_requires(std::initializer_list<const Var<R>*> vars) {
  for (const Var<R>* v : vars)
    if (*v && (*v)->requires_grad) return true;
  return false;
}

// Builds an op node. The closure is dropped when no input requires grad.
template <class R>
Var<R> make_op(Tensor<R> value, std::vector<Var<R>> parents,
               std::function<void(Node<R>&)> backward_fn) {
  auto n = std::make_shared<Node<R>>(std::move(value));
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  n->requires_grad = rg;
  if (rg) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return n;
}

// Reverse-mode sweep from a scalar root.
template <class R>
void backward(const Var<R>& root) {
  require(root->value.numel() == 1, "backward: root must be scalar");
  if (!root->requires_grad) return;

  // Iterative post-order DFS; order is reversed for the gradient sweep.
  std::vector<Node<R>*> order;
  std::unordered_set<Node<R>*> seen;
  std::vector<std::pair<Node<R>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<R>* p = node->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  grad_of(root)[0] = R(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<R>* n = *it;
    if (n->backward_fn) {
      if (!n->grad_alloc) {
        n->grad = Tensor<R>::zeros(n->value.shape);
        n->grad_alloc = true;
      }
      n->backward_fn(*n);
    }
  }

  // Interior activations/grads die with the graph; parameter grads survive
  // because the caller holds those Vars.
}

}  // namespace polytrace::ag
