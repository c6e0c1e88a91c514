#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <string>

#include "helm/errors.hpp"
#include "helm/numerics/parameter_store.hpp"
#include "helm/numerics/tape.hpp"

namespace helm {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// AdamW with decoupled weight decay (p <- p - lr*wd*p, then the bias-corrected
/// adaptive step). Moments are created on first sight of a parameter name.
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }

  /// One update at step index t >= 1. Parameters without a gradient entry are
  /// left untouched (including weight decay).
  void step(ParameterStore<T>& params, const Gradients<T>& grads, long t, double lr) {
    if (t < 1) throw ValidationError("adamw step index must be >= 1");
    for (const auto& [name, g] : grads) {
      if (!params.contains(name)) throw ValidationError("gradient for unknown parameter " + name);
      if (params.get(name).shape() != g.shape()) {
        throw ValidationError("gradient shape mismatch for " + name + ": " + to_string(g.shape()) + " vs " +
                              to_string(params.get(name).shape()));
      }
    }
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t));
    for (const auto& [name, g] : grads) {
      auto& p = params.get(name).storage();
      auto [it, fresh] = state_.try_emplace(name);
      auto& st = it->second;
      if (fresh) {
        st.m.assign(p.size(), 0.0);
        st.v.assign(p.size(), 0.0);
      }
      const auto& gd = g.storage();
      for (std::size_t i = 0; i < p.size(); ++i) {
        double pv = static_cast<double>(p[i]);
        const double gi = static_cast<double>(gd[i]);
        pv -= lr * cfg_.weight_decay * pv;
        st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * gi;
        st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        pv -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        p[i] = static_cast<T>(pv);
      }
    }
  }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamWConfig cfg_;
  std::map<std::string, Moments> state_;
};

/// Cosine annealing from base_lr at t = 0 to 0 at t = total.
inline double cosine_lr(long t, long total, double base_lr) {
  if (total <= 0) throw ValidationError("cosine schedule needs total steps > 0");
  if (t < 0 || t > total) throw ValidationError("cosine schedule step out of range");
  return base_lr * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(total))) / 2.0;
}

}  // namespace helm
