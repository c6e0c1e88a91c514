#pragma once

// Differentiable primitives over Tape/Var. Every op computes its forward value
// eagerly and, when any input requires a gradient, records a closure that
// accumulates input gradients from the output gradient.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "helm/errors.hpp"
#include "helm/numerics/tape.hpp"
#include "helm/numerics/tensor.hpp"

namespace helm::ops {

namespace detail {

/// Accumulator type for reductions; float sums are carried in double.
template <typename T>
using Acc = std::conditional_t<std::is_same_v<T, float>, double, T>;

template <typename T>
Tape<T>& same_tape(const Var<T>& a, const Var<T>& b) {
  if (&a.tape() != &b.tape()) throw ValidationError("operands recorded on different tapes");
  return a.tape();
}

inline std::size_t normalize_axis(long axis, std::size_t rank) {
  const long r = static_cast<long>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ValidationError("axis out of range");
  return static_cast<std::size_t>(axis);
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

/// Numpy-style broadcast of two shapes with per-operand strides over the output.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;
  bool same = false;

  Broadcast(const Shape& a, const Shape& b) {
    if (a == b) {
      out = a;
      same = true;
      return;
    }
    const std::size_t r = std::max(a.size(), b.size());
    Shape pa(r, 1), pb(r, 1);
    std::copy(a.begin(), a.end(), pa.begin() + static_cast<long>(r - a.size()));
    std::copy(b.begin(), b.end(), pb.begin() + static_cast<long>(r - b.size()));
    out.resize(r);
    for (std::size_t i = 0; i < r; ++i) {
      if (pa[i] == pb[i] || pb[i] == 1) {
        out[i] = pa[i];
      } else if (pa[i] == 1) {
        out[i] = pb[i];
      } else {
        throw ValidationError("shapes " + to_string(a) + " and " + to_string(b) + " do not broadcast");
      }
    }
    stride_a = strides_for(pa);
    stride_b = strides_for(pb);
  }

  template <typename F>
  void for_each(F&& f) const {
    const std::size_t total = numel(out);
    if (same) {
      for (std::size_t i = 0; i < total; ++i) f(i, i, i);
      return;
    }
    if (total == 0) return;
    const std::size_t r = out.size();
    std::vector<std::size_t> idx(r, 0);
    std::size_t ia = 0, ib = 0;
    const std::size_t last = r - 1;
    const std::size_t n_last = out[last], sa = stride_a[last], sb = stride_b[last];
    for (std::size_t io = 0; io < total;) {
      for (std::size_t j = 0; j < n_last; ++j, ++io) f(io, ia + j * sa, ib + j * sb);
      // advance odometer over leading dims
      std::size_t d = last;
      while (d-- > 0) {
        ++idx[d];
        ia += stride_a[d];
        ib += stride_b[d];
        if (idx[d] < out[d]) break;
        ia -= stride_a[d] * out[d];
        ib -= stride_b[d] * out[d];
        idx[d] = 0;
      }
    }
  }

 private:
  std::vector<std::size_t> strides_for(const Shape& padded) const {
    std::vector<std::size_t> s(padded.size(), 0);
    std::size_t acc = 1;
    for (std::size_t i = padded.size(); i-- > 0;) {
      s[i] = padded[i] == 1 && out[i] != 1 ? 0 : acc;
      acc *= padded[i];
    }
    return s;
  }
};

/// C += op(A) * op(B). `ta`: A stored [k, m]; `tb`: B stored [n, k].
template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k, bool ta, bool tb) {
  if (!ta && !tb) {
    for (std::size_t i = 0; i < m; ++i) {
      T* crow = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = a[i * k + p];
        const T* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!ta && tb) {
    for (std::size_t i = 0; i < m; ++i) {
      const T* arow = a + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const T* brow = b + j * k;
        T s = T(0);
        for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
        c[i * n + j] += s;
      }
    }
  } else if (ta && !tb) {
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const T av = a[p * m + i];
        T* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        T s = T(0);
        for (std::size_t p = 0; p < k; ++p) s += a[p * m + i] * b[j * k + p];
        c[i * n + j] += s;
      }
  }
}

template <typename T, typename Fwd, typename Deriv>
Var<T> unary(const Var<T>& x, Fwd fwd, Deriv deriv) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = fwd(xv[i]);
  const auto xid = x.id();
  // deriv(x, y) -> dy/dx
  return x.tape().record(std::move(out), x.requires_grad(), [xid, deriv](Tape<T>& t, const std::vector<T>& g) {
    T* gx = t.grad_buffer(xid);
    const auto& xv = t.value(xid);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xv[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with broadcasting.

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  auto& tape = detail::same_tape(a, b);
  const detail::Broadcast bc(a.shape(), b.shape());
  Tensor<T> out(bc.out);
  const auto& av = a.value();
  const auto& bv = b.value();
  bc.for_each([&](std::size_t o, std::size_t i, std::size_t j) { out[o] = av[i] + bv[j]; });
  const auto aid = a.id(), bid = b.id();
  return tape.record(std::move(out), a.requires_grad() || b.requires_grad(),
                     [aid, bid, bc](Tape<T>& t, const std::vector<T>& g) {
                       T* ga = t.grad_buffer(aid);
                       T* gb = t.grad_buffer(bid);
                       bc.for_each([&](std::size_t o, std::size_t i, std::size_t j) {
                         if (ga) ga[i] += g[o];
                         if (gb) gb[j] += g[o];
                       });
                     });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  auto& tape = detail::same_tape(a, b);
  const detail::Broadcast bc(a.shape(), b.shape());
  Tensor<T> out(bc.out);
  const auto& av = a.value();
  const auto& bv = b.value();
  bc.for_each([&](std::size_t o, std::size_t i, std::size_t j) { out[o] = av[i] - bv[j]; });
  const auto aid = a.id(), bid = b.id();
  return tape.record(std::move(out), a.requires_grad() || b.requires_grad(),
                     [aid, bid, bc](Tape<T>& t, const std::vector<T>& g) {
                       T* ga = t.grad_buffer(aid);
                       T* gb = t.grad_buffer(bid);
                       bc.for_each([&](std::size_t o, std::size_t i, std::size_t j) {
                         if (ga) ga[i] += g[o];
                         if (gb) gb[j] -= g[o];
                       });
                     });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  auto& tape = detail::same_tape(a, b);
  const detail::Broadcast bc(a.shape(), b.shape());
  Tensor<T> out(bc.out);
  const auto& av = a.value();
  const auto& bv = b.value();
  bc.for_each([&](std::size_t o, std::size_t i, std::size_t j) { out[o] = av[i] * bv[j]; });
  const auto aid = a.id(), bid = b.id();
  return tape.record(std::move(out), a.requires_grad() || b.requires_grad(),
                     [aid, bid, bc](Tape<T>& t, const std::vector<T>& g) {
                       T* ga = t.grad_buffer(aid);
                       T* gb = t.grad_buffer(bid);
                       const auto& av = t.value(aid);
                       const auto& bv = t.value(bid);
                       bc.for_each([&](std::size_t o, std::size_t i, std::size_t j) {
                         if (ga) ga[i] += g[o] * bv[j];
                         if (gb) gb[j] += g[o] * av[i];
                       });
                     });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  auto& tape = detail::same_tape(a, b);
  const detail::Broadcast bc(a.shape(), b.shape());
  Tensor<T> out(bc.out);
  const auto& av = a.value();
  const auto& bv = b.value();
  bc.for_each([&](std::size_t o, std::size_t i, std::size_t j) { out[o] = av[i] / bv[j]; });
  const auto aid = a.id(), bid = b.id();
  return tape.record(std::move(out), a.requires_grad() || b.requires_grad(),
                     [aid, bid, bc](Tape<T>& t, const std::vector<T>& g) {
                       T* ga = t.grad_buffer(aid);
                       T* gb = t.grad_buffer(bid);
                       const auto& av = t.value(aid);
                       const auto& bv = t.value(bid);
                       bc.for_each([&](std::size_t o, std::size_t i, std::size_t j) {
                         if (ga) ga[i] += g[o] / bv[j];
                         if (gb) gb[j] -= g[o] * av[i] / (bv[j] * bv[j]);
                       });
                     });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops.

template <typename T>
Var<T> scale(const Var<T>& x, T c) {
  return detail::unary(x, [c](T v) { return v * c; }, [c](T) { return c; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, T c) {
  return detail::unary(x, [c](T v) { return v + c; }, [](T) { return T(1); });
}

template <typename T>
Var<T> neg(const Var<T>& x) {
  return scale(x, T(-1));
}

template <typename T>
Var<T> exp(const Var<T>& x) {
  return detail::unary(x, [](T v) { return std::exp(v); }, [](T v) { return std::exp(v); });
}

template <typename T>
Var<T> log(const Var<T>& x) {
  return detail::unary(x, [](T v) { return std::log(v); }, [](T v) { return T(1) / v; });
}

template <typename T>
Var<T> sqrt(const Var<T>& x) {
  return detail::unary(x, [](T v) { return std::sqrt(v); }, [](T v) { return T(0.5) / std::sqrt(v); });
}

template <typename T>
T sigmoid_scalar(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary(x, [](T v) { return sigmoid_scalar(v); },
                       [](T v) {
                         const T s = sigmoid_scalar(v);
                         return s * (T(1) - s);
                       });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return detail::unary(x, [](T v) { return v > T(0) ? v : T(0); }, [](T v) { return v > T(0) ? T(1) : T(0); });
}

/// Exact (erf) GELU.
template <typename T>
Var<T> gelu(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * T(std::numbers::sqrt2 / 2))); },
      [](T v) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * T(std::numbers::sqrt2 / 2)));
        const T pdf = std::exp(T(-0.5) * v * v) * T(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
        return cdf + v * pdf;
      });
}

/// log(1 + e^x) in the overflow-free form max(x, 0) + log1p(e^-|x|).
template <typename T>
Var<T> softplus(const Var<T>& x) {
  return detail::unary(x, [](T v) { return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v))); },
                       [](T v) { return sigmoid_scalar(v); });
}

// ---------------------------------------------------------------------------
// Reductions.

template <typename T>
Var<T> sum(const Var<T>& x) {
  detail::Acc<T> s = 0;
  for (auto v : x.value().data()) s += v;
  const auto xid = x.id();
  return x.tape().record(Tensor<T>::scalar(static_cast<T>(s)), x.requires_grad(),
                         [xid](Tape<T>& t, const std::vector<T>& g) {
                           T* gx = t.grad_buffer(xid);
                           const std::size_t n = t.value(xid).numel();
                           for (std::size_t i = 0; i < n; ++i) gx[i] += g[0];
                         });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  const auto n = x.numel();
  if (n == 0) throw ValidationError("mean of empty tensor");
  detail::Acc<T> s = 0;
  for (auto v : x.value().data()) s += v;
  const auto xid = x.id();
  return x.tape().record(Tensor<T>::scalar(static_cast<T>(s / static_cast<detail::Acc<T>>(n))), x.requires_grad(),
                         [xid, n](Tape<T>& t, const std::vector<T>& g) {
                           T* gx = t.grad_buffer(xid);
                           const T share = g[0] / static_cast<T>(n);
                           for (std::size_t i = 0; i < n; ++i) gx[i] += share;
                         });
}

/// Sum over one axis; the axis is removed from the shape.
template <typename T>
Var<T> sum(const Var<T>& x, long axis_in) {
  const auto axis = detail::normalize_axis(axis_in, x.shape().size());
  const auto sp = detail::split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<long>(axis));
  Tensor<T> out(out_shape);
  const auto& xv = x.value();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      detail::Acc<T> s = 0;
      for (std::size_t j = 0; j < sp.n; ++j) s += xv[(o * sp.n + j) * sp.inner + i];
      out[o * sp.inner + i] = static_cast<T>(s);
    }
  const auto xid = x.id();
  return x.tape().record(std::move(out), x.requires_grad(), [xid, sp](Tape<T>& t, const std::vector<T>& g) {
    T* gx = t.grad_buffer(xid);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < sp.n; ++j)
        for (std::size_t i = 0; i < sp.inner; ++i) gx[(o * sp.n + j) * sp.inner + i] += g[o * sp.inner + i];
  });
}

template <typename T>
Var<T> mean(const Var<T>& x, long axis_in) {
  const auto axis = detail::normalize_axis(axis_in, x.shape().size());
  const auto n = x.shape()[axis];
  if (n == 0) throw ValidationError("mean over empty axis");
  return scale(sum(x, axis_in), T(1) / static_cast<T>(n));
}

// ---------------------------------------------------------------------------
// Linear algebra.

/// Batched matrix product over the last two axes. Leading (batch) dims must
/// match or one side must have none, in which case it is broadcast.
/// `trans_a`/`trans_b` use the operand transposed in its last two axes.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool trans_a = false, bool trans_b = false) {
  auto& tape = detail::same_tape(a, b);
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) throw ValidationError("matmul operands need rank >= 2");
  const std::size_t ar = as[as.size() - 2], ac = as[as.size() - 1];
  const std::size_t br = bs[bs.size() - 2], bc = bs[bs.size() - 1];
  std::size_t m = trans_a ? ac : ar;
  const std::size_t k = trans_a ? ar : ac;
  const std::size_t kb = trans_b ? bc : br;
  const std::size_t n = trans_b ? br : bc;
  if (k != kb) {
    throw ValidationError("matmul inner dimension mismatch: " + to_string(as) + " x " + to_string(bs));
  }
  const Shape a_batch(as.begin(), as.end() - 2);
  const Shape b_batch(bs.begin(), bs.end() - 2);
  std::size_t ga = numel(a_batch), gb = numel(b_batch);
  if (ga != gb && ga != 1 && gb != 1) throw ValidationError("matmul batch dims mismatch");
  if (ga > 1 && gb > 1 && a_batch != b_batch) throw ValidationError("matmul batch dims mismatch");
  Shape out_shape = ga >= gb ? a_batch : b_batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  // [..., m, k] x [k, n]: fold a's batch into rows for one large product.
  if (gb == 1 && ga > 1 && !trans_a) {
    m *= ga;
    ga = 1;
  }
  const std::size_t g = std::max(ga, gb);
  const std::size_t a_step = ga == 1 ? 0 : m * k, b_step = gb == 1 ? 0 : k * n, c_step = m * n;
  Tensor<T> out(out_shape);
  for (std::size_t i = 0; i < g; ++i)
    detail::gemm(a.value().storage().data() + i * a_step, b.value().storage().data() + i * b_step,
                 out.storage().data() + i * c_step, m, n, k, trans_a, trans_b);
  const auto aid = a.id(), bid = b.id();
  return tape.record(
      std::move(out), a.requires_grad() || b.requires_grad(),
      [=](Tape<T>& t, const std::vector<T>& gout) {
        T* gA = t.grad_buffer(aid);
        T* gB = t.grad_buffer(bid);
        const T* A = t.value(aid).storage().data();
        const T* B = t.value(bid).storage().data();
        for (std::size_t i = 0; i < g; ++i) {
          const T* dC = gout.data() + i * c_step;
          if (gA) {
            T* dA = gA + i * a_step;
            if (!trans_a)
              detail::gemm(dC, B + i * b_step, dA, m, k, n, false, !trans_b);
            else
              detail::gemm(B + i * b_step, dC, dA, k, m, n, trans_b, true);
          }
          if (gB) {
            T* dB = gB + i * b_step;
            if (!trans_b)
              detail::gemm(A + i * a_step, dC, dB, k, n, m, !trans_a, false);
            else
              detail::gemm(dC, A + i * a_step, dB, n, k, m, true, trans_a);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Normalisation.

/// Softmax over the last axis.
template <typename T>
Var<T> softmax(const Var<T>& x) {
  const auto& xv = x.value();
  if (xv.dim() == 0) throw ValidationError("softmax needs rank >= 1");
  const std::size_t n = xv.shape().back();
  const std::size_t rows = n == 0 ? 0 : xv.numel() / n;
  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.storage().data() + r * n;
    T* o = out.storage().data() + r * n;
    T mx = in[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
    if (!std::isfinite(mx)) throw NumericError("non-finite softmax input");
    detail::Acc<T> s = 0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      s += o[j];
    }
    const T inv = static_cast<T>(1 / s);
    for (std::size_t j = 0; j < n; ++j) o[j] *= inv;
  }
  const auto xid = x.id();
  Tensor<T> saved = out;
  return x.tape().record(std::move(out), x.requires_grad(),
                         [xid, n, rows, y = std::move(saved)](Tape<T>& t, const std::vector<T>& g) {
                           T* gx = t.grad_buffer(xid);
                           for (std::size_t r = 0; r < rows; ++r) {
                             const T* yr = y.storage().data() + r * n;
                             const T* gr = g.data() + r * n;
                             detail::Acc<T> dot = 0;
                             for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
                             for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += yr[j] * (gr[j] - static_cast<T>(dot));
                           }
                         });
}

/// Layer normalisation over the last axis with affine gamma/beta of that size.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-6)) {
  auto& tape = detail::same_tape(x, gamma);
  detail::same_tape(x, beta);
  const auto& xv = x.value();
  if (xv.dim() == 0) throw ValidationError("layer_norm needs rank >= 1");
  const std::size_t d = xv.shape().back();
  if (gamma.numel() != d || beta.numel() != d) throw ValidationError("layer_norm affine size mismatch");
  const std::size_t rows = xv.numel() / d;
  Tensor<T> out(xv.shape());
  Tensor<T> xhat(xv.shape());
  std::vector<T> rstd(rows);
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.storage().data() + r * d;
    detail::Acc<T> mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<detail::Acc<T>>(d);
    detail::Acc<T> var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<detail::Acc<T>>(d);
    const T rs = static_cast<T>(1 / std::sqrt(var + eps));
    rstd[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (in[j] - static_cast<T>(mu)) * rs;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  const auto xid = x.id(), gid = gamma.id(), bid = beta.id();
  return tape.record(
      std::move(out), x.requires_grad() || gamma.requires_grad() || beta.requires_grad(),
      [=, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t, const std::vector<T>& g) {
        T* gx = t.grad_buffer(xid);
        T* gg = t.grad_buffer(gid);
        T* gb = t.grad_buffer(bid);
        const auto& gam = t.value(gid);
        std::vector<T> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* gr = g.data() + r * d;
          const T* hr = xhat.storage().data() + r * d;
          detail::Acc<T> s1 = 0, s2 = 0;
          for (std::size_t j = 0; j < d; ++j) {
            if (gg) gg[j] += gr[j] * hr[j];
            if (gb) gb[j] += gr[j];
            dxhat[j] = gr[j] * gam[j];
            s1 += dxhat[j];
            s2 += dxhat[j] * hr[j];
          }
          if (gx) {
            const T inv_d = T(1) / static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j)
              gx[r * d + j] += rstd[r] * (dxhat[j] - static_cast<T>(s1) * inv_d - hr[j] * static_cast<T>(s2) * inv_d);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Shape manipulation.

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  const auto xid = x.id();
  return x.tape().record(std::move(out), x.requires_grad(), [xid](Tape<T>& t, const std::vector<T>& g) {
    T* gx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

/// Generalised transpose: output axis i is input axis perm[i].
template <typename T>
Var<T> permute(const Var<T>& x, const std::vector<std::size_t>& perm) {
  const Shape& in = x.shape();
  const std::size_t r = in.size();
  if (perm.size() != r) throw ValidationError("permute rank mismatch");
  std::vector<bool> seen(r, false);
  for (auto p : perm) {
    if (p >= r || seen[p]) throw ValidationError("invalid permutation");
    seen[p] = true;
  }
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  Shape out_shape(r);
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in[perm[i]];
    src_stride[i] = in_stride[perm[i]];
  }
  // map[o] = input offset of output element o
  const std::size_t total = x.numel();
  std::vector<std::size_t> map(total);
  {
    std::vector<std::size_t> idx(r, 0);
    std::size_t src = 0;
    for (std::size_t o = 0; o < total; ++o) {
      map[o] = src;
      for (std::size_t d = r; d-- > 0;) {
        ++idx[d];
        src += src_stride[d];
        if (idx[d] < out_shape[d]) break;
        src -= src_stride[d] * out_shape[d];
        idx[d] = 0;
      }
    }
  }
  Tensor<T> out(out_shape);
  const auto& xv = x.value();
  for (std::size_t o = 0; o < total; ++o) out[o] = xv[map[o]];
  const auto xid = x.id();
  return x.tape().record(std::move(out), x.requires_grad(),
                         [xid, map = std::move(map)](Tape<T>& t, const std::vector<T>& g) {
                           T* gx = t.grad_buffer(xid);
                           for (std::size_t o = 0; o < g.size(); ++o) gx[map[o]] += g[o];
                         });
}

/// Swap the last two axes.
template <typename T>
Var<T> transpose(const Var<T>& x) {
  const std::size_t r = x.shape().size();
  if (r < 2) throw ValidationError("transpose needs rank >= 2");
  std::vector<std::size_t> perm(r);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[r - 1], perm[r - 2]);
  return permute(x, perm);
}

/// Broadcast to a larger shape; the gradient is summed back.
template <typename T>
Var<T> expand(const Var<T>& x, const Shape& shape) {
  const detail::Broadcast bc(shape, x.shape());
  if (bc.out != shape) throw ValidationError("cannot expand " + to_string(x.shape()) + " to " + to_string(shape));
  Tensor<T> out(shape);
  const auto& xv = x.value();
  bc.for_each([&](std::size_t o, std::size_t, std::size_t j) { out[o] = xv[j]; });
  const auto xid = x.id();
  return x.tape().record(std::move(out), x.requires_grad(), [xid, bc](Tape<T>& t, const std::vector<T>& g) {
    T* gx = t.grad_buffer(xid);
    bc.for_each([&](std::size_t o, std::size_t, std::size_t j) { gx[j] += g[o]; });
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, long axis_in) {
  if (parts.empty()) throw ValidationError("concat of nothing");
  auto& tape = parts.front().tape();
  const Shape& first = parts.front().shape();
  const auto axis = detail::normalize_axis(axis_in, first.size());
  Shape out_shape = first;
  out_shape[axis] = 0;
  bool needs_grad = false;
  for (const auto& p : parts) {
    detail::same_tape(parts.front(), p);
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw ValidationError("concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != first[i]) throw ValidationError("concat shape mismatch");
    out_shape[axis] += s[axis];
    needs_grad = needs_grad || p.requires_grad();
  }
  const auto sp = detail::split_at(out_shape, axis);
  Tensor<T> out(out_shape);
  std::vector<std::size_t> ids, widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[axis];
    const auto& pv = p.value();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(pv.storage().data() + o * w * sp.inner, w * sp.inner,
                  out.storage().data() + (o * sp.n + offset) * sp.inner);
    ids.push_back(p.id());
    widths.push_back(w);
    offset += w;
  }
  return tape.record(std::move(out), needs_grad, [ids, widths, sp](Tape<T>& t, const std::vector<T>& g) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const std::size_t w = widths[k];
      if (T* gp = t.grad_buffer(ids[k])) {
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t e = 0; e < w * sp.inner; ++e) gp[o * w * sp.inner + e] += g[(o * sp.n + offset) * sp.inner + e];
      }
      offset += w;
    }
  });
}

template <typename T>
Var<T> slice(const Var<T>& x, long axis_in, std::size_t start, std::size_t length) {
  const auto axis = detail::normalize_axis(axis_in, x.shape().size());
  if (start + length > x.shape()[axis]) throw ValidationError("slice out of range");
  const auto sp = detail::split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  Tensor<T> out(out_shape);
  const auto& xv = x.value();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(xv.storage().data() + (o * sp.n + start) * sp.inner, length * sp.inner,
                out.storage().data() + o * length * sp.inner);
  const auto xid = x.id();
  return x.tape().record(std::move(out), x.requires_grad(),
                         [xid, sp, start, length](Tape<T>& t, const std::vector<T>& g) {
                           T* gx = t.grad_buffer(xid);
                           for (std::size_t o = 0; o < sp.outer; ++o)
                             for (std::size_t e = 0; e < length * sp.inner; ++e)
                               gx[(o * sp.n + start) * sp.inner + e] += g[o * length * sp.inner + e];
                         });
}

/// Gather along axis 0.
template <typename T>
Var<T> index_select(const Var<T>& x, const std::vector<std::size_t>& rows) {
  if (x.shape().empty()) throw ValidationError("index_select needs rank >= 1");
  const std::size_t n = x.shape()[0];
  const std::size_t row = n == 0 ? 0 : x.numel() / n;
  Shape out_shape = x.shape();
  out_shape[0] = rows.size();
  Tensor<T> out(out_shape);
  const auto& xv = x.value();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw ValidationError("index_select row out of range");
    std::copy_n(xv.storage().data() + rows[i] * row, row, out.storage().data() + i * row);
  }
  const auto xid = x.id();
  return x.tape().record(std::move(out), x.requires_grad(), [xid, rows, row](Tape<T>& t, const std::vector<T>& g) {
    T* gx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t e = 0; e < row; ++e) gx[rows[i] * row + e] += g[i * row + e];
  });
}

/// Same value, no gradient path.
template <typename T>
Var<T> detach(const Var<T>& x) {
  return x.tape().constant(x.value());
}

// ---------------------------------------------------------------------------
// Operator sugar.

template <typename T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) {
  return add(a, b);
}
template <typename T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) {
  return sub(a, b);
}
template <typename T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) {
  return mul(a, b);
}
template <typename T>
Var<T> operator/(const Var<T>& a, const Var<T>& b) {
  return div(a, b);
}
template <typename T>
Var<T> operator*(const Var<T>& a, T c) {
  return scale(a, c);
}
template <typename T>
Var<T> operator+(const Var<T>& a, T c) {
  return add_scalar(a, c);
}

}  // namespace helm::ops
