#pragma once

#include <deque>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "helm/errors.hpp"
#include "helm/numerics/tensor.hpp"

namespace helm {

template <typename T>
class Tape;

/// Gradients keyed by parameter name.
template <typename T>
using Gradients = std::map<std::string, Tensor<T>>;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t numel() const { return value().numel(); }
  bool requires_grad() const;

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records one forward pass for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, which is a topological order, so
/// backward is a single reverse sweep. A tape supports exactly one backward.
/// Parameters are copied onto the tape when first referenced; referencing the
/// same name again returns the same node so that gradients from several uses
/// (e.g. two augmented views through one encoder) accumulate.
template <typename T>
class Tape {
 public:
  /// Receives d(loss)/d(output) and accumulates into input gradients via grad_buffer().
  using BackwardFn = std::function<void(Tape&, const std::vector<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, nullptr, {}); }

  /// Trainable (requires_grad) or frozen parameter. Frozen parameters act as
  /// constants and never appear in the gradient map.
  Var<T> parameter(const std::string& name, const Tensor<T>& value, bool requires_grad = true) {
    if (auto it = params_.find(name); it != params_.end()) {
      if (nodes_[it->second].value != value)
        throw ValidationError("parameter '" + name + "' registered twice on one tape with different values");
      return Var<T>(this, it->second);
    }
    auto v = push(value, requires_grad, nullptr, name);
    params_.emplace(name, v.id());
    return v;
  }

  Var<T> record(Tensor<T> value, bool requires_grad, BackwardFn fn) {
    return push(std::move(value), requires_grad, requires_grad ? std::move(fn) : nullptr, {});
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Zero-initialised gradient buffer of node `id`, or nullptr when the node
  /// does not require a gradient.
  T* grad_buffer(std::size_t id) {
    auto& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad.assign(n.value.numel(), T(0));
    return n.grad.data();
  }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  Gradients<T> backward(const Var<T>& loss) {
    if (loss.id() >= nodes_.size() || &loss.tape() != this) throw ValidationError("loss does not belong to this tape");
    if (consumed_) throw ValidationError("tape already consumed");
    if (nodes_[loss.id()].value.numel() != 1) {
      throw ValidationError("backward requires a scalar loss, got shape " + to_string(nodes_[loss.id()].value.shape()));
    }
    consumed_ = true;
    Gradients<T> out;
    if (!nodes_[loss.id()].requires_grad) return out;
    grad_buffer(loss.id())[0] = T(1);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      // Move out so a node never reads its own buffer while writing inputs.
      std::vector<T> g = std::move(n.grad);
      n.backward(*this, g);
      n.backward = nullptr;
      n.grad = std::move(g);
    }
    for (const auto& [name, id] : params_) {
      auto& n = nodes_[id];
      if (n.requires_grad && !n.grad.empty()) out.emplace(name, Tensor<T>(n.value.shape(), n.grad));
    }
    return out;
  }

 private:
  struct Node {
    Tensor<T> value;
    bool requires_grad = false;
    BackwardFn backward;
    std::vector<T> grad;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, BackwardFn fn, const std::string&) {
    if (consumed_) throw ValidationError("tape already consumed");
    nodes_.push_back(Node{std::move(value), requires_grad, std::move(fn), {}});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
  std::unordered_map<std::string, std::size_t> params_;
  bool consumed_ = false;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape_->requires_grad(id_);
}

}  // namespace helm
