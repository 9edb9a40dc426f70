// Reverse-mode autodiff tape.
//
// Ops append nodes in evaluation order, so node ids are already a
// topological order of the DAG and backward() is a single reverse sweep
// that visits each reachable node exactly once. Gradients accumulate by
// summation, which is what shared subexpressions require; a second
// backward() without zero_grad() keeps accumulating by contract.
#pragma once

#include <deque>
#include <functional>
#include <memory>
#include <vector>

#include "fpc/tensor.hpp"

namespace fpc {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first use, same shape as value
  std::vector<Node*> parents;
  std::function<void(Node&)> backprop;  // scatters node.grad into parents
  bool needs_grad = false;
  int id = -1;
  const char* op = "";

  Tensor<T>& ensure_grad() {
    if (!grad.defined() || grad.numel() == 0) grad = Tensor<T>(value.shape());
    return grad;
  }

  void add_grad(const Tensor<T>& g) {
    Tensor<T>& acc = ensure_grad();
    if (!acc.same_shape(g)) throw shape_error("gradient shape mismatch");
    axpy(acc.numel(), T(1), g.data(), acc.mut());
  }
};

template <class T>
class Graph {
 public:
  // recording=false keeps values only; no closures, no backward.
  explicit Graph(bool recording = true) : recording_(recording) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return recording_; }

  Node<T>* leaf(Tensor<T> value, bool needs_grad) {
    Node<T>* n = new_node();
    n->value = std::move(value);
    n->needs_grad = recording_ && needs_grad;
    n->op = "leaf";
    return n;
  }

  Node<T>* constant(Tensor<T> value) { return leaf(std::move(value), false); }

  Node<T>* make(Tensor<T> value, std::vector<Node<T>*> parents,
                std::function<void(Node<T>&)> backprop, const char* op) {
    Node<T>* n = new_node();
    n->value = std::move(value);
    n->op = op;
    if (recording_) {
      bool need = false;
      for (Node<T>* p : parents) need = need || p->needs_grad;
      n->needs_grad = need;
      if (need) {
        n->parents = std::move(parents);
        n->backprop = std::move(backprop);
      }
    }
    return n;
  }

  // Seeds root with d(root)/d(root) = 1 and sweeps the tape in reverse
  // creation order, restricted to nodes the root actually depends on.
  // Interior grads are scratch space and reset per sweep; leaf grads
  // accumulate across calls until zero_grad().
  void backward(Node<T>* root) {
    if (!recording_) throw error("backward() on a non-recording graph");
    if (root->value.numel() != 1) throw shape_error("backward root must be scalar");
    std::vector<bool> reachable(nodes_.size(), false);
    mark_reachable(root, reachable);
    for (auto& n : nodes_)
      if (reachable[static_cast<std::size_t>(n->id)] && n->backprop) n->grad = Tensor<T>();
    root->ensure_grad().mut()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>& n = **it;
      if (!reachable[static_cast<std::size_t>(n.id)]) continue;
      if (n.backprop && n.grad.defined() && n.grad.numel() > 0) n.backprop(n);
    }
  }

  void zero_grad() {
    for (auto& n : nodes_) n->grad = Tensor<T>();
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  void mark_reachable(Node<T>* root, std::vector<bool>& reachable) {
    std::vector<Node<T>*> stack{root};
    reachable[static_cast<std::size_t>(root->id)] = true;
    while (!stack.empty()) {
      Node<T>* n = stack.back();
      stack.pop_back();
      for (Node<T>* p : n->parents) {
        if (!reachable[static_cast<std::size_t>(p->id)]) {
          reachable[static_cast<std::size_t>(p->id)] = true;
          stack.push_back(p);
        }
      }
    }
  }

  Node<T>* new_node() {
    nodes_.push_back(std::make_unique<Node<T>>());
    Node<T>* n = nodes_.back().get();
    n->id = static_cast<int>(nodes_.size()) - 1;
    return n;
  }

  std::deque<std::unique_ptr<Node<T>>> nodes_;
  bool recording_;
};

}  // namespace fpc
