#pragma once

#include <cmath>
#include <string>

#include "helm/encoder.hpp"

namespace helm {

struct ByolHeadsConfig {
  std::size_t hidden = 64;  // p_hidden
  std::size_t out = 16;     // p_out
  double tau = 0.996;
  bool symmetric = false;
  bool pool_patches = true;  // F_p from patch tokens; false pools the class tokens

  void validate() const {
    if (hidden == 0 || out == 0) throw ValidationError("projector widths must be positive");
    if (!(tau >= 0 && tau <= 1)) throw ValidationError("EMA momentum must lie in [0, 1]");
  }
};

/// Two-layer MLP head: Linear -> LayerNorm -> ReLU -> Linear.
template <typename T>
void init_mlp_head(ParameterStore<T>& params, const std::string& name, std::size_t in, std::size_t hidden,
                   std::size_t out, Rng& rng) {
  params.add(name + ".fc1.weight", trunc_normal<T>({in, hidden}, 0.02, rng));
  params.add(name + ".fc1.bias", Tensor<T>({hidden}));
  params.add(name + ".norm.gamma", Tensor<T>({hidden}, T(1)));
  params.add(name + ".norm.beta", Tensor<T>({hidden}));
  params.add(name + ".fc2.weight", trunc_normal<T>({hidden, out}, 0.02, rng));
  params.add(name + ".fc2.bias", Tensor<T>({out}));
}

template <typename T>
Var<T> mlp_head(const Var<T>& x, const ParameterStore<T>& params, const std::string& name) {
  auto& t = x.tape();
  auto h = linear(x, params, name + ".fc1");
  h = ops::relu(ops::layer_norm(h, params.on(t, name + ".norm.gamma"), params.on(t, name + ".norm.beta")));
  return linear(h, params, name + ".fc2");
}

/// Online projector g and predictor q.
template <typename T>
void init_byol_heads(ParameterStore<T>& params, std::size_t d, const ByolHeadsConfig& cfg, Rng& rng) {
  cfg.validate();
  init_mlp_head(params, "projector", d, cfg.hidden, cfg.out, rng);
  init_mlp_head(params, "predictor", cfg.out, cfg.hidden, cfg.out, rng);
}

/// mean over rows of 2 - 2 cos(p_i, z_i). The target side is detached.
template <typename T>
Var<T> byol_loss(const Var<T>& online_pred, const Var<T>& target_proj) {
  using namespace ops;
  const auto& s = online_pred.shape();
  if (s.size() != 2 || target_proj.shape() != s)
    throw ValidationError("byol_loss expects matching [B, p] inputs, got " + to_string(s) + " and " +
                          to_string(target_proj.shape()));
  const std::size_t b = s[0], p = s[1];
  auto row_norm_check = [&](const Tensor<T>& v) {
    for (std::size_t i = 0; i < b; ++i) {
      double n = 0;
      for (std::size_t j = 0; j < p; ++j) n += static_cast<double>(v[i * p + j]) * v[i * p + j];
      if (!(std::sqrt(n) > 1e-12)) throw NumericError("byol_loss: zero-norm row " + std::to_string(i));
    }
  };
  row_norm_check(online_pred.value());
  row_norm_check(target_proj.value());
  auto normalize = [&](const Var<T>& x) { return div(x, reshape(sqrt(sum(mul(x, x), 1)), {b, 1})); };
  auto cos = sum(mul(normalize(online_pred), normalize(detach(target_proj))), 1);
  return mean(add_scalar(scale(cos, T(-2)), T(2)));
}

/// xi <- tau * xi + (1 - tau) * theta for every target entry.
template <typename T>
void ema_update(const ParameterStore<T>& online, ParameterStore<T>& target, double tau) {
  if (!(tau >= 0 && tau <= 1)) throw ValidationError("EMA momentum must lie in [0, 1]");
  for (auto& [name, xi] : target) {
    if (!online.contains(name)) throw ValidationError("EMA name mismatch: online store lacks " + name);
    const auto& theta = online.get(name);
    if (theta.shape() != xi.shape()) throw ValidationError("EMA shape mismatch for " + name);
    const T a = static_cast<T>(tau), c = static_cast<T>(1 - tau);
    for (std::size_t i = 0; i < xi.numel(); ++i) xi[i] = a * xi[i] + c * theta[i];
  }
}

}  // namespace helm
