#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "helm/augment.hpp"
#include "helm/data.hpp"
#include "helm/model.hpp"
#include "helm/numerics/optim.hpp"

namespace helm {

struct LossWeights {
  double s = 1, g = 1, b = 1;
};

struct TrainConfig {
  Variant variant = Variant::helm;
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  double base_lr = 1e-3;
  double ratio = 1.0;
  std::uint64_t seed = 0;
  LossWeights weights;
  AdamWConfig adamw;
  bool augment_supervised = true;
  AugmentationPolicy supervised_policy = AugmentationPolicy::weak();
  AugmentationPolicy strong_policy = AugmentationPolicy::strong();
  std::size_t labeled_per_batch = 0;  // 0: proportional mixing

  void validate() const {
    if (batch_size < 1) throw ValidationError("batch_size must be positive");
    if (labeled_per_batch >= batch_size && labeled_per_batch > 0)
      throw ValidationError("labeled_per_batch must be smaller than batch_size");
    if (!(base_lr > 0)) throw ValidationError("base_lr must be positive");
    if (!(ratio > 0 && ratio <= 1)) throw ValidationError("labeled ratio must lie in (0, 1]");
    if (weights.s < 0 || weights.g < 0 || weights.b < 0) throw ValidationError("loss weights must be non-negative");
    supervised_policy.validate();
    strong_policy.validate();
  }
};

struct LossBundle {
  double L_s = 0, L_g = 0, L_b = 0, L = 0;
  std::size_t step = 0;
  double lr = 0;
  std::size_t batch = 0, labeled = 0;
};

/// Images and targets for one step. `weak` feeds the supervised and graph
/// branches and the target network; `strong` feeds the online BYOL path.
template <typename T>
struct StepBatch {
  Tensor<T> weak;    // [B, C, H, W]
  Tensor<T> strong;  // [B, C, H, W] or empty when BYOL is off
  BatchLabels<T> labels;
};

template <typename T>
struct CompositeLoss {
  Var<T> total;
  std::optional<Var<T>> L_s, L_g, L_b;
  double max_activation = 0;
};

namespace detail {

template <typename T>
Var<T> byol_pool(const ForwardBundle<T>& f, const ByolHeadsConfig& cfg) {
  return cfg.pool_patches ? f.pooled_patches : f.pooled_cls;
}

template <typename T>
double max_abs(const Tensor<T>& t) {
  double m = 0;
  for (auto v : t.data()) m = std::max(m, std::abs(static_cast<double>(v)));
  return m;
}

}  // namespace detail

/// BYOL term: online q(g(F_p(view_a))) against target g_xi(F_p(view_b)),
/// averaged over both directions when the symmetric flag is set.
template <typename T>
Var<T> ssl_forward(Tape<T>& tape, const HelmModel<T>& m, const Tensor<T>& view_a, const Tensor<T>& view_b,
                   const ForwardBundle<T>* online_b = nullptr) {
  const auto& cfg = m.config;
  auto predict = [&](const ForwardBundle<T>& f) {
    return mlp_head(mlp_head(detail::byol_pool(f, cfg.ssl), m.online, "projector"), m.online, "predictor");
  };
  auto project_target = [&](const Tensor<T>& images) {
    auto f = encoder_forward(tape, images, cfg.encoder, m.target);
    return mlp_head(detail::byol_pool(f, cfg.ssl), m.target, "projector");
  };
  auto loss = byol_loss(predict(encoder_forward(tape, view_a, cfg.encoder, m.online)), project_target(view_b));
  if (!cfg.ssl.symmetric) return loss;
  const auto fb = online_b ? *online_b : encoder_forward(tape, view_b, cfg.encoder, m.online);
  auto back = byol_loss(predict(fb), project_target(view_a));
  return ops::scale(ops::add(loss, back), T(0.5));
}

/// L = w_s L_s + w_g L_g + w_b L_b over the active branches. L_s and L_g are
/// skipped when the batch has no labeled rows.
template <typename T>
CompositeLoss<T> composite_loss(Tape<T>& tape, const HelmModel<T>& m, const StepBatch<T>& batch, const LossWeights& w) {
  CompositeLoss<T> out;
  const auto& cfg = m.config;
  const bool has_labels = batch.labels.labeled_count() > 0;
  const bool need_online_weak = has_labels || (m.flags.use_byol && cfg.ssl.symmetric);
  std::optional<ForwardBundle<T>> weak;
  if (need_online_weak) {
    weak = encoder_forward(tape, batch.weak, cfg.encoder, m.online);
    out.max_activation = detail::max_abs(weak->cls.value());
  }
  std::vector<Var<T>> terms;
  auto weigh = [&](const Var<T>& v, double wt) { return ops::scale(v, static_cast<T>(wt)); };
  if (has_labels) {
    out.L_s = bce_loss(classify(weak->pooled_cls, m.online), batch.labels);
    terms.push_back(weigh(*out.L_s, w.s));
    if (m.flags.use_graph) {
      out.L_g = graph_loss(graph_forward(weak->cls, m.adjacency, cfg.graph, m.online), batch.labels);
      terms.push_back(weigh(*out.L_g, w.g));
    }
  }
  if (m.flags.use_byol) {
    if (batch.strong.numel() == 0) throw ValidationError("BYOL branch needs a strong view");
    out.L_b = ssl_forward(tape, m, batch.strong, batch.weak, weak ? &*weak : nullptr);
    terms.push_back(weigh(*out.L_b, w.b));
  }
  if (terms.empty()) {
    out.total = tape.constant(Tensor<T>::scalar(T(0)));
    return out;
  }
  out.total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) out.total = ops::add(out.total, terms[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Batching.

struct BatchPlan {
  std::vector<std::size_t> indices;
  std::vector<bool> labeled;

  std::size_t labeled_count() const { return static_cast<std::size_t>(std::count(labeled.begin(), labeled.end(), true)); }
};

inline std::size_t steps_per_epoch(const SplitPlan& plan, std::size_t batch_size, bool semi_supervised) {
  const std::size_t pool = semi_supervised ? plan.pool_size() : plan.labeled.size();
  return (pool + batch_size - 1) / batch_size;
}

/// One epoch of batches. Semi-supervised: every pool sample once, labeled
/// samples spread proportionally (cumulative floor) with at least one per
/// batch while any remain. Supervised: labeled samples only.
///
/// With labeled_per_batch = k > 0 (semi-supervised only) every batch holds k
/// labeled samples cycled through reshuffled passes of the labeled pool and
/// batch_size - k unlabeled samples drawn without replacement; the number of
/// batches is unchanged.
inline std::vector<BatchPlan> compose_epoch(const SplitPlan& plan, std::size_t batch_size, bool semi_supervised, Rng& rng,
                                            std::size_t labeled_per_batch = 0) {
  if (batch_size < 1) throw ValidationError("batch_size must be positive");
  std::vector<std::size_t> lab = plan.labeled, unl = semi_supervised ? plan.unlabeled : std::vector<std::size_t>{};
  if (lab.empty() && unl.empty()) throw ValidationError("compose_epoch: empty pools");
  if (!unl.empty() && batch_size < 2) throw ValidationError("batch_size must be >= 2 when unlabeled data is present");
  rng.shuffle(lab.begin(), lab.end());
  rng.shuffle(unl.begin(), unl.end());
  const std::size_t total = lab.size() + unl.size();
  const std::size_t nb = (total + batch_size - 1) / batch_size;
  std::vector<BatchPlan> out;

  if (labeled_per_batch > 0 && !unl.empty() && !lab.empty()) {
    if (labeled_per_batch >= batch_size) throw ValidationError("labeled_per_batch must be smaller than batch_size");
    std::size_t used_l = 0, used_u = 0;
    for (std::size_t i = 0; i < nb; ++i) {
      BatchPlan b;
      for (std::size_t k = 0; k < labeled_per_batch; ++k) {
        if (used_l == lab.size()) {
          rng.shuffle(lab.begin(), lab.end());
          used_l = 0;
        }
        b.indices.push_back(lab[used_l++]);
        b.labeled.push_back(true);
      }
      for (std::size_t k = labeled_per_batch; k < batch_size && used_u < unl.size(); ++k) {
        b.indices.push_back(unl[used_u++]);
        b.labeled.push_back(false);
      }
      out.push_back(std::move(b));
    }
    return out;
  }

  std::size_t used_l = 0, used_u = 0;
  for (std::size_t i = 0; i < nb; ++i) {
    const std::size_t remaining = total - used_l - used_u;
    const std::size_t size = std::min(batch_size, remaining);
    const std::size_t rem_l = lab.size() - used_l, rem_u = unl.size() - used_u;
    const std::size_t cum = (i + 1) * lab.size() / nb;
    std::size_t n_l = cum > used_l ? cum - used_l : 0;
    if (rem_l > 0) n_l = std::max<std::size_t>(n_l, 1);
    n_l = std::min({n_l, rem_l, size});
    std::size_t n_u = std::min(size - n_l, rem_u);
    n_l = std::min(rem_l, size - n_u);
    BatchPlan b;
    for (std::size_t k = 0; k < n_l; ++k) {
      b.indices.push_back(lab[used_l++]);
      b.labeled.push_back(true);
    }
    for (std::size_t k = 0; k < n_u; ++k) {
      b.indices.push_back(unl[used_u++]);
      b.labeled.push_back(false);
    }
    out.push_back(std::move(b));
  }
  return out;
}

/// Stack [C, H, W] float images into a [B, C, H, W] tensor of T.
template <typename T>
Tensor<T> stack_images(const std::vector<Tensor<float>>& images) {
  if (images.empty()) throw ValidationError("cannot stack an empty image list");
  Shape s = images[0].shape();
  s.insert(s.begin(), images.size());
  Tensor<T> out(s);
  const std::size_t per = images[0].numel();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].shape() != images[0].shape()) throw ValidationError("images in a batch differ in shape");
    std::copy(images[i].storage().begin(), images[i].storage().end(), out.storage().begin() + static_cast<long>(i * per));
  }
  return out;
}

/// Augment and stack a planned batch. Augmentation seeds depend only on
/// (run seed, epoch, sample index, view).
template <typename T>
StepBatch<T> materialize(const Dataset& ds, const BatchPlan& plan, const HelmModel<T>& m, const TrainConfig& cfg,
                         std::size_t epoch) {
  const std::size_t b = plan.indices.size();
  std::vector<Tensor<float>> weak(b), strong(m.flags.use_byol ? b : 0);
  parallel_for(b, [&](std::size_t i) {
    const auto& img = ds.samples.at(plan.indices[i]).image;
    const auto base = derive_seed(cfg.seed, epoch, plan.indices[i]);
    weak[i] = cfg.augment_supervised || m.flags.use_byol ? augment(img, cfg.supervised_policy, derive_seed(base, 1)) : img;
    if (m.flags.use_byol) strong[i] = augment(img, cfg.strong_policy, derive_seed(base, 2));
  });
  std::vector<LabelVector> rows(b);
  for (std::size_t i = 0; i < b; ++i)
    if (plan.labeled[i]) rows[i] = m.project(ds.samples[plan.indices[i]].labels);
  StepBatch<T> out;
  out.weak = stack_images<T>(weak);
  if (m.flags.use_byol) out.strong = stack_images<T>(strong);
  out.labels = BatchLabels<T>::from_vectors(rows, plan.labeled, m.labels());
  return out;
}

// ---------------------------------------------------------------------------
// Optimisation.

template <typename T>
struct TrainState {
  HelmModel<T> model;
  AdamW<T> optimizer;
  long step = 0;
  long total_steps = 0;
};

/// Called with "optimizer" after the AdamW update and "ema" after the target update.
using StepObserver = std::function<void(const std::string& event)>;

template <typename T>
LossBundle train_step(TrainState<T>& state, const StepBatch<T>& batch, const TrainConfig& cfg,
                      const StepObserver& observer = {}) {
  auto& m = state.model;
  LossBundle out;
  out.step = static_cast<std::size_t>(state.step);
  out.lr = cosine_lr(state.step, std::max<long>(state.total_steps, state.step + 1), cfg.base_lr);
  out.batch = batch.labels.batch();
  out.labeled = batch.labels.labeled_count();
  Tape<T> tape;
  auto loss = composite_loss(tape, m, batch, cfg.weights);
  auto value_of = [](const std::optional<Var<T>>& v) { return v ? static_cast<double>(v->value().item()) : 0.0; };
  out.L_s = value_of(loss.L_s);
  out.L_g = value_of(loss.L_g);
  out.L_b = value_of(loss.L_b);
  out.L = static_cast<double>(loss.total.value().item());
  if (!std::isfinite(out.L)) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << out.step << ": L_s=" << out.L_s << " L_g=" << out.L_g << " L_b=" << out.L_b
        << ", max |activation| = " << loss.max_activation;
    throw NumericError(msg.str());
  }
  ++state.step;
  if (loss.total.requires_grad()) {
    const auto grads = tape.backward(loss.total);
    state.optimizer.step(m.online, grads, state.step, out.lr);
    if (observer) observer("optimizer");
  }
  if (m.flags.use_byol) {
    ema_update(m.online, m.target, m.config.ssl.tau);
    if (observer) observer("ema");
  }
  return out;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double L_s = 0, L_g = 0, L_b = 0, L = 0, lr = 0, seconds = 0;
  std::size_t param_count = 0;
  std::map<std::string, std::size_t> param_breakdown;
};

template <typename T>
struct FitResult {
  TrainState<T> state;
  std::vector<EpochRecord> epochs;
  std::vector<LossBundle> steps;
};

struct FitCallbacks {
  std::function<void(const EpochRecord&)> on_epoch;
  std::function<void(const LossBundle&)> on_step;
};

/// epochs x steps_per_epoch train steps under one cosine schedule.
template <typename T>
FitResult<T> fit(const Dataset& ds, const SplitPlan& plan, const TrainConfig& cfg, const ModelConfig& model_cfg,
                 const FitCallbacks& callbacks = {}) {
  cfg.validate();
  FitResult<T> out;
  out.state.model = make_model<T>(ds.hierarchy, cfg.variant, model_cfg, cfg.seed);
  out.state.optimizer = AdamW<T>(cfg.adamw);
  const bool semi = out.state.model.flags.semi_supervised();
  if (plan.labeled.empty()) throw ValidationError("training needs at least one labeled sample");
  const auto per_epoch = steps_per_epoch(plan, cfg.batch_size, semi);
  out.state.total_steps = static_cast<long>(cfg.epochs * per_epoch);
  Rng batch_rng(derive_seed(cfg.seed, 0x6261746368ULL));
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const auto start = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = e + 1;
    std::size_t n_s = 0, n_g = 0, n_b = 0, n = 0;
    for (const auto& bp : compose_epoch(plan, cfg.batch_size, semi, batch_rng, cfg.labeled_per_batch)) {
      const auto batch = materialize<T>(ds, bp, out.state.model, cfg, e);
      const auto lb = train_step(out.state, batch, cfg);
      if (n == 0) rec.lr = lb.lr;
      ++n;
      rec.L += lb.L;
      if (lb.labeled > 0) {
        ++n_s;
        rec.L_s += lb.L_s;
        if (out.state.model.flags.use_graph) ++n_g, rec.L_g += lb.L_g;
      }
      if (out.state.model.flags.use_byol) ++n_b, rec.L_b += lb.L_b;
      out.steps.push_back(lb);
      if (callbacks.on_step) callbacks.on_step(lb);
    }
    rec.L = n ? rec.L / static_cast<double>(n) : 0;
    rec.L_s = n_s ? rec.L_s / static_cast<double>(n_s) : 0;
    rec.L_g = n_g ? rec.L_g / static_cast<double>(n_g) : 0;
    rec.L_b = n_b ? rec.L_b / static_cast<double>(n_b) : 0;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    rec.param_count = out.state.model.param_count();
    rec.param_breakdown = out.state.model.param_breakdown();
    out.epochs.push_back(rec);
    if (callbacks.on_epoch) callbacks.on_epoch(rec);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Inference.

template <typename T>
struct Predictions {
  Tensor<double> scores;      // [N, labels] sigmoid of supervised logits
  Tensor<double> pooled;      // [N, d] f_CLS
  Tensor<double> cls_tokens;  // [N, labels, d]
};

template <typename T>
Predictions<T> predict(const HelmModel<T>& m, const Dataset& ds, const std::vector<std::size_t>& indices,
                       std::size_t batch_size = 32) {
  const std::size_t n = indices.size(), labels = m.labels(), d = m.config.encoder.embed_dim;
  Predictions<T> out{Tensor<double>({n, labels}), Tensor<double>({n, d}), Tensor<double>({n, labels, d})};
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t b = std::min(batch_size, n - start);
    std::vector<Tensor<float>> imgs;
    for (std::size_t i = 0; i < b; ++i) imgs.push_back(ds.samples.at(indices[start + i]).image);
    Tape<T> tape;
    auto f = encoder_forward(tape, stack_images<T>(imgs), m.config.encoder, m.online);
    auto logits = classify(f.pooled_cls, m.online);
    for (std::size_t i = 0; i < b * labels; ++i)
      out.scores[start * labels + i] = static_cast<double>(ops::sigmoid_scalar(logits.value()[i]));
    for (std::size_t i = 0; i < b * d; ++i) out.pooled[start * d + i] = static_cast<double>(f.pooled_cls.value()[i]);
    for (std::size_t i = 0; i < b * labels * d; ++i)
      out.cls_tokens[start * labels * d + i] = static_cast<double>(f.cls.value()[i]);
  }
  return out;
}

}  // namespace helm
