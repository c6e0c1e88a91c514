#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "helm/errors.hpp"
#include "helm/hierarchy.hpp"
#include "helm/numerics/tensor.hpp"
#include "helm/random.hpp"

namespace helm {

/// Scores and binary targets over leaf columns, [N, K] row-major.
struct MetricRecord {
  std::size_t n = 0, k = 0;
  std::vector<double> scores;
  std::vector<std::uint8_t> targets;

  void validate() const {
    if (scores.size() != n * k || targets.size() != n * k) throw ValidationError("metric record shape mismatch");
    for (double s : scores)
      if (!(s >= 0 && s <= 1)) throw ValidationError("scores must lie in [0, 1]");
  }
};

struct ConfusionCounts {
  std::vector<std::size_t> tp, fp, fn;

  std::size_t total_tp() const { return sum(tp); }
  std::size_t total_fp() const { return sum(fp); }
  std::size_t total_fn() const { return sum(fn); }

 private:
  static std::size_t sum(const std::vector<std::size_t>& v) {
    std::size_t s = 0;
    for (auto x : v) s += x;
    return s;
  }
};

/// Per-class counts predicting positive when score >= threshold.
inline ConfusionCounts confusion_at(const MetricRecord& r, double threshold) {
  ConfusionCounts c{std::vector<std::size_t>(r.k), std::vector<std::size_t>(r.k), std::vector<std::size_t>(r.k)};
  for (std::size_t i = 0; i < r.n; ++i)
    for (std::size_t j = 0; j < r.k; ++j) {
      const bool pred = r.scores[i * r.k + j] >= threshold, pos = r.targets[i * r.k + j] != 0;
      if (pred && pos) ++c.tp[j];
      if (pred && !pos) ++c.fp[j];
      if (!pred && pos) ++c.fn[j];
    }
  return c;
}

struct PrPoint {
  double recall = 0, precision = 1;
};

/// Micro-averaged PR curve: one point per distinct score (descending),
/// preceded by the anchor (0, 1).
inline std::vector<PrPoint> micro_pr_curve(const MetricRecord& r) {
  r.validate();
  std::vector<std::pair<double, bool>> cells(r.n * r.k);
  std::size_t positives = 0;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    cells[i] = {r.scores[i], r.targets[i] != 0};
    positives += r.targets[i] != 0;
  }
  if (positives == 0) throw ValidationError("micro PR curve needs at least one positive");
  std::sort(cells.begin(), cells.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<PrPoint> curve{{0.0, 1.0}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < cells.size();) {
    const double s = cells[i].first;
    for (; i < cells.size() && cells[i].first == s; ++i) (cells[i].second ? tp : fp)++;
    curve.push_back({static_cast<double>(tp) / static_cast<double>(positives),
                     static_cast<double>(tp) / static_cast<double>(tp + fp)});
  }
  return curve;
}

/// Trapezoidal area under a PR curve, integrating over recall.
inline double auprc(const std::vector<PrPoint>& curve) {
  if (curve.size() < 2) throw ValidationError("auprc needs at least two curve points");
  double area = 0;
  for (std::size_t i = 1; i < curve.size(); ++i)
    area += (curve[i].recall - curve[i - 1].recall) * (curve[i].precision + curve[i - 1].precision) / 2;
  return area;
}

inline double auprc(const MetricRecord& r) { return auprc(micro_pr_curve(r)); }

/// Mean over samples of the fraction of (positive, negative) pairs with
/// f(pos) <= f(neg). Samples without positives or negatives contribute 0.
inline double ranking_loss(const MetricRecord& r) {
  r.validate();
  if (r.n == 0) throw ValidationError("ranking_loss needs at least one sample");
  double total = 0;
  std::vector<double> neg;
  for (std::size_t i = 0; i < r.n; ++i) {
    neg.clear();
    std::vector<double> pos;
    for (std::size_t j = 0; j < r.k; ++j) (r.targets[i * r.k + j] ? pos : neg).push_back(r.scores[i * r.k + j]);
    if (pos.empty() || neg.empty()) continue;
    std::sort(neg.begin(), neg.end());
    std::size_t bad = 0;
    for (double p : pos) bad += static_cast<std::size_t>(neg.end() - std::lower_bound(neg.begin(), neg.end(), p));
    total += static_cast<double>(bad) / static_cast<double>(pos.size() * neg.size());
  }
  return total / static_cast<double>(r.n);
}

// ---------------------------------------------------------------------------
// Clustering quality.

/// Lloyd's k-means with k-means++ seeding from a fixed seed; returns a
/// cluster id per row of `points` ([N, d] row-major).
inline std::vector<std::size_t> kmeans(const std::vector<double>& points, std::size_t n, std::size_t d, std::size_t k,
                                       std::uint64_t seed, std::size_t max_iter = 100) {
  if (k == 0 || n < k) throw ValidationError("kmeans needs 1 <= k <= N");
  if (points.size() != n * d) throw ValidationError("kmeans point matrix has wrong size");
  auto dist2 = [&](std::size_t i, const double* c) {
    double s = 0;
    for (std::size_t e = 0; e < d; ++e) s += (points[i * d + e] - c[e]) * (points[i * d + e] - c[e]);
    return s;
  };
  Rng rng(seed);
  std::vector<double> centers(k * d);
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  std::size_t first = rng.below(n);
  std::copy_n(points.begin() + static_cast<long>(first * d), d, centers.begin());
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) total += best[i] = std::min(best[i], dist2(i, &centers[(c - 1) * d]));
    std::size_t pick = n - 1;
    if (total > 0) {
      double u = rng.uniform() * total;
      for (std::size_t i = 0; i < n; ++i)
        if ((u -= best[i]) < 0) {
          pick = i;
          break;
        }
    } else {
      pick = rng.below(n);
    }
    std::copy_n(points.begin() + static_cast<long>(pick * d), d, centers.begin() + static_cast<long>(c * d));
  }
  std::vector<std::size_t> assign(n, k);
  for (std::size_t it = 0; it < max_iter; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t arg = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c)
        if (double v = dist2(i, &centers[c * d]); v < bd) bd = v, arg = c;
      changed |= assign[i] != arg;
      assign[i] = arg;
    }
    if (!changed) break;
    std::vector<double> sums(k * d, 0.0);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[assign[i]];
      for (std::size_t e = 0; e < d; ++e) sums[assign[i] * d + e] += points[i * d + e];
    }
    for (std::size_t c = 0; c < k; ++c)
      if (counts[c])
        for (std::size_t e = 0; e < d; ++e) centers[c * d + e] = sums[c * d + e] / static_cast<double>(counts[c]);
  }
  return assign;
}

/// I(A; B) / sqrt(H(A) H(B)) from two labelings of the same items.
inline double nmi(const std::vector<std::size_t>& clusters, const std::vector<std::size_t>& labels) {
  if (clusters.size() != labels.size() || clusters.empty()) throw ValidationError("nmi needs equal, non-empty labelings");
  const double n = static_cast<double>(clusters.size());
  std::map<std::size_t, double> pc, pl;
  std::map<std::pair<std::size_t, std::size_t>, double> joint;
  for (std::size_t i = 0; i < clusters.size(); ++i) {
    pc[clusters[i]] += 1;
    pl[labels[i]] += 1;
    joint[{clusters[i], labels[i]}] += 1;
  }
  auto entropy = [n](const std::map<std::size_t, double>& m) {
    double h = 0;
    for (const auto& [k, c] : m) h -= c / n * std::log(c / n);
    return h;
  };
  const double hc = entropy(pc), hl = entropy(pl);
  if (hl <= 0) throw ValidationError("degenerate single-cluster labeling");
  if (hc <= 0) return 0.0;
  double mi = 0;
  for (const auto& [key, c] : joint) mi += c / n * std::log(c * n / (pc[key.first] * pl[key.second]));
  return std::clamp(mi / std::sqrt(hc * hl), 0.0, 1.0);
}

struct NmiResult {
  std::vector<double> per_level;
  double mean = 0;
};

/// Cluster `embeddings` ([N, d]) once per level with k = k_per_level[l] and
/// score each clustering against level_labels[l].
inline NmiResult knn_nmi(const std::vector<double>& embeddings, std::size_t n, std::size_t d,
                         const std::vector<std::vector<std::size_t>>& level_labels,
                         const std::vector<std::size_t>& k_per_level, std::uint64_t seed = 0) {
  if (level_labels.size() != k_per_level.size() || level_labels.empty())
    throw ValidationError("knn_nmi needs one cluster count per level");
  NmiResult out;
  for (std::size_t l = 0; l < level_labels.size(); ++l) {
    if (level_labels[l].size() != n) throw ValidationError("level labels do not match embedding count");
    if (n <= k_per_level[l]) throw ValidationError("knn_nmi needs more points than clusters");
    out.per_level.push_back(nmi(kmeans(embeddings, n, d, k_per_level[l], derive_seed(seed, l)), level_labels[l]));
  }
  for (double v : out.per_level) out.mean += v;
  out.mean /= static_cast<double>(out.per_level.size());
  return out;
}

/// NMI of leaf-token embeddings: one point per (sample, active leaf), taken
/// from that leaf's class token; at level L the point is labeled with its
/// leaf's level-L ancestor. `cls_tokens` is [N, M, d] over the columns of `h`.
inline NmiResult hierarchical_nmi(const Tensor<double>& cls_tokens, const std::vector<LabelVector>& labels,
                                  const LabelHierarchy& h, std::uint64_t seed = 0) {
  const std::size_t n = cls_tokens.size(0), m = cls_tokens.size(1), d = cls_tokens.size(2);
  if (m != h.size() || labels.size() != n) throw ValidationError("hierarchical_nmi input shape mismatch");
  std::vector<double> points;
  std::vector<std::vector<std::size_t>> levels(h.depth());
  for (std::size_t i = 0; i < n; ++i)
    for (auto leaf : h.leaves()) {
      if (!labels[i][leaf]) continue;
      points.insert(points.end(), cls_tokens.storage().begin() + static_cast<long>((i * m + leaf) * d),
                    cls_tokens.storage().begin() + static_cast<long>((i * m + leaf + 1) * d));
      for (std::size_t l = 0; l < h.depth(); ++l)
        levels[l].push_back(h.level(leaf) > static_cast<int>(l) ? h.ancestor_at(leaf, static_cast<int>(l) + 1) : leaf);
    }
  std::vector<std::size_t> ks;
  for (auto s : h.level_sizes()) ks.push_back(s);
  return knn_nmi(points, points.size() / std::max<std::size_t>(d, 1), d, levels, ks, seed);
}

/// Mean rank per variant across settings: rank 1 is best, ties share the
/// mean of their ranks. values[variant][setting].
inline std::map<std::string, double> average_ranks(const std::map<std::string, std::vector<double>>& values,
                                                   bool higher_is_better) {
  if (values.empty()) throw ValidationError("average_ranks needs at least one variant");
  const std::size_t settings = values.begin()->second.size();
  for (const auto& [v, row] : values) {
    if (row.size() != settings) throw ValidationError("missing cell for variant " + v);
    for (double x : row)
      if (std::isnan(x)) throw ValidationError("missing cell for variant " + v);
  }
  std::map<std::string, double> out;
  for (std::size_t s = 0; s < settings; ++s)
    for (const auto& [v, row] : values) {
      std::size_t better = 0, tied = 0;
      for (const auto& [w, other] : values) {
        if (other[s] == row[s]) ++tied;
        else if (higher_is_better ? other[s] > row[s] : other[s] < row[s]) ++better;
      }
      out[v] += static_cast<double>(better) + (static_cast<double>(tied) + 1) / 2;
    }
  for (auto& [v, r] : out) r /= static_cast<double>(settings);
  return out;
}

}  // namespace helm
