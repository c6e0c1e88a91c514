#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "helm/errors.hpp"
#include "helm/numerics/parameter_store.hpp"
#include "helm/numerics/tape.hpp"

namespace helm {

namespace detail {

template <typename T>
T eval_scalar(const std::function<Var<T>(Tape<T>&)>& f) {
  Tape<T> tape;
  const auto out = f(tape);
  if (out.numel() != 1) throw ValidationError("gradcheck function must be scalar-valued");
  const T v = out.value()[0];
  if (!std::isfinite(v)) throw NumericError("gradcheck function returned a non-finite value");
  return v;
}

inline double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
}

}  // namespace detail

/// max_i |analytic_i - central_difference_i| / max(1, |analytic_i|) for a
/// scalar function of one tensor.
template <typename T>
double gradcheck(const std::function<Var<T>(Tape<T>&, const Var<T>&)>& f, const Tensor<T>& point, double eps) {
  if (!point.all_finite()) throw ValidationError("gradcheck point must be finite");
  Tensor<T> analytic;
  {
    Tape<T> tape;
    auto x = tape.parameter("x", point);
    auto y = f(tape, x);
    if (y.numel() != 1) throw ValidationError("gradcheck function must be scalar-valued");
    if (!std::isfinite(y.value()[0])) throw NumericError("gradcheck function returned a non-finite value");
    auto g = tape.backward(y);
    analytic = g.count("x") ? g.at("x") : Tensor<T>(point.shape());
  }
  double worst = 0.0;
  Tensor<T> probe = point;
  for (std::size_t i = 0; i < point.numel(); ++i) {
    const T orig = probe[i];
    auto at = [&](T v) {
      probe[i] = v;
      return detail::eval_scalar<T>([&](Tape<T>& t) { return f(t, t.parameter("x", probe)); });
    };
    const double hi = at(orig + static_cast<T>(eps));
    const double lo = at(orig - static_cast<T>(eps));
    probe[i] = orig;
    worst = std::max(worst, detail::rel_error(analytic[i], (hi - lo) / (2.0 * eps)));
  }
  return worst;
}

/// Same measure over every element of every trainable parameter in `params`.
/// `f` must register parameters from `params` on the tape it is given.
template <typename T>
double gradcheck(const std::function<Var<T>(Tape<T>&, const ParameterStore<T>&)>& f, ParameterStore<T>& params,
                 double eps, std::string* worst_name = nullptr) {
  Gradients<T> analytic;
  {
    Tape<T> tape;
    auto y = f(tape, params);
    if (y.numel() != 1) throw ValidationError("gradcheck function must be scalar-valued");
    if (!std::isfinite(y.value()[0])) throw NumericError("gradcheck function returned a non-finite value");
    analytic = tape.backward(y);
  }
  double worst = 0.0;
  for (auto& [name, tensor] : params) {
    auto it = analytic.find(params.tag(name));
    for (std::size_t i = 0; i < tensor.numel(); ++i) {
      const T orig = tensor[i];
      tensor[i] = orig + static_cast<T>(eps);
      const double hi = detail::eval_scalar<T>([&](Tape<T>& t) { return f(t, params); });
      tensor[i] = orig - static_cast<T>(eps);
      const double lo = detail::eval_scalar<T>([&](Tape<T>& t) { return f(t, params); });
      tensor[i] = orig;
      const double a = it == analytic.end() ? 0.0 : static_cast<double>(it->second[i]);
      const double e = detail::rel_error(a, (hi - lo) / (2.0 * eps));
      if (e > worst) {
        worst = e;
        if (worst_name) *worst_name = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return worst;
}

}  // namespace helm
