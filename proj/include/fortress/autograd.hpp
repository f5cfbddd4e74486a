#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fortress/errors.hpp"
#include "fortress/tensor.hpp"

namespace fortress {

/// Trainable tensor with its accumulated gradient.
template <Scalar T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
  void zero_grad() { grad.fill(T(0)); }
};

template <Scalar T>
struct Node {
  std::string op;
  Tensor<T> value;
  const Tensor<T>* external = nullptr;  // parameter leaves alias the parameter storage
  Tensor<T> grad;
  bool requires_grad = false;
  Parameter<T>* param = nullptr;
  std::function<void(Node&)> backward;  // pushes this->grad into the inputs it captured

  const Tensor<T>& val() const { return external != nullptr ? *external : value; }

  Tensor<T>& ensure_grad() {
    if (grad.empty() && val().numel() > 0) grad = Tensor<T>(val().shape());
    return grad;
  }
};

/// Handle to a value recorded on a tape. Cheap to copy.
template <Scalar T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  const Tensor<T>& value() const { return node_->val(); }
  const Shape& shape() const { return node_->val().shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }
  Node<T>& node() const { return *node_; }
  const std::shared_ptr<Node<T>>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Ordered record of executed differentiable operations.
///
/// Nodes are appended in execution order, so the vector is already a
/// topological order; backward walks it once in reverse. With gradients
/// disabled nothing is retained and intermediates are freed as soon as
/// their Vars go out of scope.
template <Scalar T>
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  /// Input leaf. When requires_grad is set its gradient is kept after backward.
  Var<T> leaf(Tensor<T> value, bool requires_grad = false, std::string op = "input") {
    auto node = std::make_shared<Node<T>>();
    node->op = std::move(op);
    node->value = std::move(value);
    node->requires_grad = requires_grad && grad_enabled_;
    if (node->requires_grad) nodes_.push_back(node);
    return Var<T>(node);
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false, "constant"); }

  /// Leaf aliasing a parameter; one node per parameter per tape.
  Var<T> param(Parameter<T>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var<T>(it->second);
    auto node = std::make_shared<Node<T>>();
    node->op = p.name;
    node->external = &p.value;
    node->requires_grad = grad_enabled_;
    node->param = &p;
    if (grad_enabled_) {
      nodes_.push_back(node);
      param_nodes_.emplace(&p, node);
    }
    return Var<T>(node);
  }

  /// Appends an op result. `make_backward` is invoked only when some input
  /// needs a gradient; it returns the closure run during backward.
  template <typename MakeBackward>
  Var<T> record(std::string op, Tensor<T> out, std::initializer_list<Var<T>> inputs, MakeBackward&& make_backward) {
    if (!out.all_finite()) {
      std::string names;
      for (const auto& in : inputs) names += (names.empty() ? "" : ", ") + in.node().op;
      throw NumericError("non-finite value produced by " + op + " (inputs: " + names + ")");
    }
    auto node = std::make_shared<Node<T>>();
    node->op = std::move(op);
    node->value = std::move(out);
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (grad_enabled_ && needs) {
      node->requires_grad = true;
      node->backward = make_backward();
      nodes_.push_back(node);
    }
    return Var<T>(node);
  }

  /// Reverse sweep from a scalar loss. Parameter gradients are accumulated
  /// (+=) into Parameter::grad; input-leaf gradients stay on their nodes.
  void backward(const Var<T>& loss) {
    if (loss.value().numel() != 1) {
      throw ConfigError("backward requires a scalar loss, got shape " + loss.shape().str());
    }
    if (!loss.requires_grad()) return;
    loss.node().ensure_grad()[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>& node = **it;
      if (node.grad.empty()) continue;
      if (node.backward) {
        node.backward(node);
        node.grad = Tensor<T>();  // intermediate gradients are not needed afterwards
      } else if (node.param != nullptr) {
        node.param->grad += node.grad;
      }
    }
  }

  /// Gradient of a requires_grad leaf after backward (zeros if unreached).
  Tensor<T> grad(const Var<T>& v) const {
    if (v.node().grad.empty()) return Tensor<T>(v.shape());
    return v.node().grad;
  }

  void clear() {
    nodes_.clear();
    param_nodes_.clear();
  }

 private:
  bool grad_enabled_;
  std::vector<std::shared_ptr<Node<T>>> nodes_;
  std::unordered_map<const Parameter<T>*, std::shared_ptr<Node<T>>> param_nodes_;
};

/// Adds `g` into the input's gradient if it participates in differentiation.
template <Scalar T>
inline Tensor<T>* grad_sink(const std::shared_ptr<Node<T>>& in) {
  return in->requires_grad ? &in->ensure_grad() : nullptr;
}

}  // namespace fortress
