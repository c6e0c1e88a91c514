#pragma once

#include <string>
#include <vector>

#include "helm/encoder.hpp"
#include "helm/hierarchy.hpp"

namespace helm {

/// Targets for a batch. Unlabeled rows are zero placeholders and never reach a loss.
template <typename T>
struct BatchLabels {
  Tensor<T> targets;          // [B, M]
  std::vector<bool> labeled;  // B flags

  std::size_t batch() const { return labeled.size(); }

  std::vector<std::size_t> labeled_rows() const {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < labeled.size(); ++i)
      if (labeled[i]) rows.push_back(i);
    return rows;
  }

  std::size_t labeled_count() const { return labeled_rows().size(); }

  static BatchLabels from_vectors(const std::vector<LabelVector>& rows, const std::vector<bool>& mask,
                                  std::size_t m) {
    if (rows.size() != mask.size()) throw ValidationError("label rows and mask differ in length");
    BatchLabels out{Tensor<T>({rows.size(), m}), mask};
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (!mask[i]) continue;
      if (rows[i].size() != m) throw ValidationError("label vector length does not match M");
      for (std::size_t j = 0; j < m; ++j) out.targets[i * m + j] = rows[i][j] ? T(1) : T(0);
    }
    return out;
  }
};

template <typename T>
void init_classifier(ParameterStore<T>& params, std::size_t d, std::size_t m, Rng& rng,
                     const std::string& name = "cls_head") {
  params.add(name + ".weight", trunc_normal<T>({d, m}, 0.02, rng));
  params.add(name + ".bias", Tensor<T>({m}));
}

/// Supervised logits p_s: f_CLS [B, d] -> [B, M].
template <typename T>
Var<T> classify(const Var<T>& f_cls, const ParameterStore<T>& params, const std::string& name = "cls_head") {
  return linear(f_cls, params, name);
}

/// Mean over labeled rows of the per-sample mean binary cross-entropy,
/// evaluated as softplus(z) - y*z.
template <typename T>
Var<T> bce_loss(const Var<T>& logits, const BatchLabels<T>& labels) {
  using namespace ops;
  const auto& s = logits.shape();
  if (s.size() != 2 || s[0] != labels.batch() || labels.targets.shape() != s)
    throw ValidationError("logits " + to_string(s) + " do not match labels " + to_string(labels.targets.shape()));
  const auto rows = labels.labeled_rows();
  if (rows.empty()) throw ValidationError("bce_loss needs at least one labeled sample");
  auto& tape = logits.tape();
  const std::size_t m = s[1];
  Tensor<T> y({rows.size(), m});
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t j = 0; j < m; ++j) y[r * m + j] = labels.targets[rows[r] * m + j];
  auto z = index_select(logits, rows);
  auto per_element = sub(softplus(z), mul(tape.constant(std::move(y)), z));
  return mean(mean(per_element, 1));
}

}  // namespace helm
