#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "bowda/tensor.hpp"

namespace bowda {

/// Named trainable tensor (or non-trainable buffer such as batch-norm running
/// statistics) with its gradient accumulator.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  Parameter(std::string n, Tensor<T> v, bool is_trainable = true)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), trainable(is_trainable) {}

  void zero_grad() { grad.fill(T(0)); }
};

template <typename T>
class Tape;

/// Handle to a node on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
};

/// Records executed operations in creation order; backward walks the record
/// in reverse, so every node is visited once after all of its consumers.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, Var<T> self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }

  /// Leaf bound to a parameter. Gradients reach `p.grad` after backward();
  /// untrainable parameters (or `track == false`) enter as constants.
  Var<T> parameter(Parameter<T>& p, bool track = true) {
    const bool rg = track && p.trainable;
    Var<T> v = push(p.value, rg, nullptr);
    if (rg) nodes_[v.id].param = &p;
    return v;
  }

  /// Records an op result. `backward` reads the node's gradient through
  /// grad_of(self) and accumulates into its inputs' gradients.
  Var<T> push(Tensor<T> value, bool requires_grad, Backward backward) {
    Node node;
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_[v.id].value; }
  bool requires_grad(Var<T> v) const { return nodes_[v.id].requires_grad; }

  /// Gradient buffer of a node, allocated (zeroed) on first access.
  Tensor<T>& grad_of(Var<T> v) {
    Node& n = nodes_[v.id];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape(), T(0));
    return n.grad;
  }
  bool has_grad(Var<T> v) const { return !nodes_[v.id].grad.empty(); }

  /// Seeds the given nodes with upstream gradients and back-propagates.
  void backward(const std::vector<std::pair<Var<T>, const Tensor<T>*>>& seeds) {
    for (const auto& [v, g] : seeds) {
      if (!requires_grad(v)) continue;
      if (!(g->shape() == value(v).shape())) {
        throw std::invalid_argument("Tape::backward: seed shape " + to_string(g->shape()) +
                                    " does not match node shape " + to_string(value(v).shape()));
      }
      Tensor<T>& dst = grad_of(v);
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += (*g)[i];
    }
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) {
        n.backward(*this, Var<T>{this, i});
      } else if (n.param) {
        auto& pg = n.param->grad;
        for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
      }
    }
  }

  void backward(Var<T> v, const Tensor<T>& seed) { backward({{v, &seed}}); }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Backward backward;
    Parameter<T>* param = nullptr;
  };
  std::vector<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(*this);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape->requires_grad(*this);
}

}  // namespace bowda
