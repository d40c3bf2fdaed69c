#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "prompthash/tensor.hpp"

namespace prompthash {

// Learning-rate group a parameter belongs to (heads follow the surrogate
// backbone rate, modules the prompt/fusion rate).
enum class ParamGroup { Heads, Modules };

template <typename T>
struct Var {
  int idx = -1;
  bool valid() const { return idx >= 0; }
};

// Reverse-mode tape. Nodes are appended in topological order; backward walks
// the tape in reverse. Values are stored per node, gradients are allocated on
// first touch.
template <typename T>
class Graph {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool grad_alloc = false;
    bool requires_grad = false;
    std::function<void(Graph&)> backward;
  };

  struct LeafRef {
    std::string name;
    Tensor<T>* param = nullptr;  // storage the leaf was copied from
    Var<T> var;
    ParamGroup group = ParamGroup::Modules;
  };

  Var<T> constant(Tensor<T> t) { return make(std::move(t), false, nullptr); }

  Var<T> constant_scalar(T v) { return constant(Tensor<T>::scalar(v)); }

  Var<T> input(Tensor<T> t, bool requires_grad = true) {
    return make(std::move(t), requires_grad, nullptr);
  }

  // Leaf bound to external storage; registered so trainers and the gradient
  // checker can enumerate (name, storage, grad) triplets.
  Var<T> param(Tensor<T>& stored, std::string name, ParamGroup group = ParamGroup::Modules) {
    Var<T> v = make(stored, true, nullptr);
    leaves_.push_back(LeafRef{std::move(name), &stored, v, group});
    return v;
  }

  Var<T> make(Tensor<T> value, bool requires_grad, std::function<void(Graph&)> backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<T>{static_cast<int>(nodes_.size()) - 1};
  }

  void set_backward(Var<T> v, std::function<void(Graph&)> fn) {
    nodes_[v.idx].backward = std::move(fn);
  }

  Tensor<T>& value(Var<T> v) { return nodes_[v.idx].value; }
  const Tensor<T>& value(Var<T> v) const { return nodes_[v.idx].value; }

  bool requires_grad(Var<T> v) const { return nodes_[v.idx].requires_grad; }
  bool grad_allocated(Var<T> v) const { return nodes_[v.idx].grad_alloc; }

  // Gradient buffer, zero-initialized on first access.
  Tensor<T>& grad(Var<T> v) {
    Node& n = nodes_[v.idx];
    if (!n.grad_alloc) {
      n.grad = Tensor<T>(n.value.shape());
      n.grad_alloc = true;
    }
    return n.grad;
  }

  void backward(Var<T> loss) {
    if (value(loss).numel() != 1) {
      throw ContractError("backward requires a scalar loss");
    }
    grad(loss)[0] = T(1);
    for (int i = loss.idx; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.requires_grad && n.grad_alloc && n.backward) n.backward(*this);
    }
  }

  const std::vector<LeafRef>& leaves() const { return leaves_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  // deque keeps value()/grad() references stable while the tape grows
  std::deque<Node> nodes_;
  std::vector<LeafRef> leaves_;
};

}  // namespace prompthash
