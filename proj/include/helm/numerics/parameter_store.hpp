#pragma once

#include <map>
#include <string>
#include <string_view>

#include "helm/errors.hpp"
#include "helm/numerics/tape.hpp"
#include "helm/numerics/tensor.hpp"
#include "helm/random.hpp"

namespace helm {

enum class ParamRole { online, target };

/// Named trainable tensors. Online (theta) stores are optimised by gradients;
/// target (xi) stores only move through EMA and register on a tape as frozen.
template <typename T>
class ParameterStore {
 public:
  explicit ParameterStore(ParamRole role = ParamRole::online) : role_(role) {}

  ParamRole role() const { return role_; }

  void add(const std::string& name, Tensor<T> value) {
    if (!params_.emplace(name, std::move(value)).second) throw ValidationError("duplicate parameter " + name);
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  const Tensor<T>& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ValidationError("missing parameter " + name);
    return it->second;
  }

  Tensor<T>& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ValidationError("missing parameter " + name);
    return it->second;
  }

  /// Register `name` on the tape; gradients flow only for the online role.
  Var<T> on(Tape<T>& tape, const std::string& name) const {
    return tape.parameter(tag(name), get(name), role_ == ParamRole::online);
  }

  /// Name under which this store's parameters appear on a tape. Target
  /// parameters are prefixed so they never alias the online copy.
  std::string tag(const std::string& name) const { return role_ == ParamRole::target ? "target/" + name : name; }

  std::size_t count(std::string_view prefix = {}) const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_)
      if (name.starts_with(prefix)) n += t.numel();
    return n;
  }

  /// Copy of the entries whose names start with any of `prefixes`, in `role`.
  ParameterStore subset(std::initializer_list<std::string_view> prefixes, ParamRole role) const {
    ParameterStore out(role);
    for (const auto& [name, t] : params_)
      for (auto p : prefixes)
        if (name.starts_with(p)) {
          out.add(name, t);
          break;
        }
    return out;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

 private:
  ParamRole role_;
  std::map<std::string, Tensor<T>> params_;
};

/// Truncated-normal(std) initialiser.
template <typename T>
Tensor<T> trunc_normal(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.storage()) v = static_cast<T>(rng.truncated_normal(stddev));
  return t;
}

}  // namespace helm
