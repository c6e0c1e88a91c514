#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "helm/classification.hpp"
#include "helm/encoder.hpp"
#include "helm/graph.hpp"
#include "helm/hierarchy.hpp"
#include "helm/ssl.hpp"

namespace helm {

enum class Variant { mlc, hmlc, helm_g, helm_b, helm };

struct VariantFlags {
  bool use_hierarchy = true;
  bool use_graph = false;
  bool use_byol = false;

  /// True when unlabeled samples enter training batches.
  bool semi_supervised() const { return use_graph || use_byol; }
};

inline VariantFlags variant_flags(Variant v) {
  switch (v) {
    case Variant::mlc: return {false, false, false};
    case Variant::hmlc: return {true, false, false};
    case Variant::helm_g: return {true, true, false};
    case Variant::helm_b: return {true, false, true};
    case Variant::helm: return {true, true, true};
  }
  throw ValidationError("unknown variant");
}

inline const std::vector<std::pair<Variant, std::string>>& variant_names() {
  static const std::vector<std::pair<Variant, std::string>> names = {
      {Variant::mlc, "mlc"}, {Variant::hmlc, "hmlc"}, {Variant::helm_g, "helm-g"},
      {Variant::helm_b, "helm-b"}, {Variant::helm, "helm"}};
  return names;
}

inline std::string variant_name(Variant v) {
  for (const auto& [k, name] : variant_names())
    if (k == v) return name;
  throw ValidationError("unknown variant");
}

inline Variant parse_variant(const std::string& s) {
  for (const auto& [k, name] : variant_names())
    if (name == s) return k;
  throw ValidationError("unknown variant '" + s + "' (expected mlc, hmlc, helm-g, helm-b, helm)");
}

struct ModelConfig {
  EncoderConfig encoder;
  GraphBranchConfig graph;
  ByolHeadsConfig ssl;
};

/// Parameters and fixed structure for one variant. `hierarchy` is the label
/// set the heads predict: the full taxonomy, or its leaves alone for MLC.
/// `columns[j]` is the id in the full taxonomy of output column j.
template <typename T>
struct HelmModel {
  Variant variant = Variant::helm;
  VariantFlags flags;
  ModelConfig config;
  LabelHierarchy full_hierarchy;
  LabelHierarchy hierarchy;
  std::vector<std::size_t> columns;
  Tensor<T> adjacency;
  ParameterStore<T> online{ParamRole::online};
  ParameterStore<T> target{ParamRole::target};

  std::size_t labels() const { return hierarchy.size(); }

  /// Output columns that are leaves of the full taxonomy, paired with their full ids.
  std::vector<std::pair<std::size_t, std::size_t>> leaf_columns() const {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t j = 0; j < columns.size(); ++j)
      if (full_hierarchy.is_leaf(columns[j])) out.emplace_back(j, columns[j]);
    return out;
  }

  /// Project a label vector over the full taxonomy onto this model's columns.
  LabelVector project(const LabelVector& full) const {
    LabelVector out{std::vector<std::uint8_t>(columns.size(), 0)};
    for (std::size_t j = 0; j < columns.size(); ++j) out.bits[j] = full.bits.at(columns[j]);
    return out;
  }

  /// Parameter counts per component, in scalars.
  std::map<std::string, std::size_t> param_breakdown() const {
    std::map<std::string, std::size_t> out;
    out["encoder"] = online.count("encoder.");
    out["cls_head"] = online.count("cls_head.");
    if (flags.use_graph) out["graph"] = online.count("graph.");
    if (flags.use_byol) {
      out["projector"] = online.count("projector.");
      out["predictor"] = online.count("predictor.");
      out["target"] = target.count();
    }
    return out;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& [k, v] : param_breakdown()) n += v;
    return n;
  }
};

/// Build a model for `variant`. Each component draws from its own derived
/// seed, so shared components start identical across variants.
template <typename T>
HelmModel<T> make_model(const LabelHierarchy& full, Variant variant, ModelConfig cfg, std::uint64_t seed) {
  HelmModel<T> m;
  m.variant = variant;
  m.flags = variant_flags(variant);
  m.full_hierarchy = full;
  if (m.flags.use_hierarchy) {
    m.hierarchy = full;
    for (std::size_t i = 0; i < full.size(); ++i) m.columns.push_back(i);
  } else {
    m.hierarchy = full.leaf_only();
    m.columns = full.leaves();
  }
  cfg.encoder.num_labels = m.hierarchy.size();
  cfg.encoder.validate();
  m.config = cfg;
  const std::size_t d = cfg.encoder.embed_dim, labels = m.hierarchy.size();

  Rng enc_rng(derive_seed(seed, 1));
  init_encoder(m.online, cfg.encoder, enc_rng);
  Rng head_rng(derive_seed(seed, 2));
  init_classifier(m.online, d, labels, head_rng);
  if (m.flags.use_graph) {
    Rng graph_rng(derive_seed(seed, 3));
    init_graph(m.online, d, labels, cfg.graph, graph_rng);
    m.adjacency = neighbor_mean_matrix<T>(build_edges(m.hierarchy, cfg.graph.reverse_edges, cfg.graph.self_loops), labels);
  }
  if (m.flags.use_byol) {
    Rng ssl_rng(derive_seed(seed, 4));
    init_byol_heads(m.online, d, cfg.ssl, ssl_rng);
    m.target = m.online.subset({"encoder.", "projector."}, ParamRole::target);
  }
  return m;
}

}  // namespace helm
