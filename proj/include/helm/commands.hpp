#pragma once

#include <glob.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "helm/config.hpp"
#include "helm/metrics.hpp"
#include "helm/numerics/checkpoint.hpp"
#include "helm/numerics/gradcheck.hpp"

namespace helm {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { exit_ok = 0, exit_io = 1, exit_validation = 2, exit_numeric = 3 };

/// Run `body`, mapping the error families onto exit codes and printing the
/// message to `err`.
inline int guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return exit_io;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << "\n";
    return exit_numeric;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return exit_validation;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return exit_io;
  } catch (const json::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_validation;
  }
}

// ---------------------------------------------------------------------------
// validate-hierarchy

inline json hierarchy_summary(const LabelHierarchy& h) {
  return {{"M", h.size()},
          {"levels", h.level_sizes()},
          {"leaves", h.leaves().size()},
          {"edges", build_edges(h, false, false).edges.size()}};
}

inline int cmd_validate_hierarchy(const fs::path& path, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto text = read_file(path);
    try {
      out << hierarchy_summary(parse_hierarchy(text)).dump() << "\n";
      return static_cast<int>(exit_ok);
    } catch (const ValidationError& e) {
      out << json{{"valid", false}, {"errors", {e.what()}}}.dump() << "\n";
      return static_cast<int>(exit_validation);
    }
  });
}

// ---------------------------------------------------------------------------
// Shared run plumbing.

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<std::string> variant;
  std::optional<double> ratio;
  std::optional<fs::path> out;
};

inline void apply_overrides(RunConfig& cfg, const Overrides& o) {
  if (o.seed) cfg.train.seed = *o.seed;
  if (o.epochs) cfg.train.epochs = *o.epochs;
  if (o.variant) cfg.train.variant = parse_variant(*o.variant);
  if (o.ratio) {
    static const double allowed[] = {0.01, 0.05, 0.1, 0.25, 1.0};
    if (std::find(std::begin(allowed), std::end(allowed), *o.ratio) == std::end(allowed))
      throw ValidationError("--ratio must be one of 0.01, 0.05, 0.1, 0.25, 1.0");
    cfg.train.ratio = *o.ratio;
  }
  if (o.out) cfg.output = *o.out;
  cfg.validate();
}

inline LabelHierarchy load_hierarchy(const fs::path& path) { return parse_hierarchy(read_file(path)); }

inline Dataset load_dataset(const RunConfig& cfg, const LabelHierarchy& h) {
  if (cfg.data.kind == DataKind::synthetic) return generate_synthetic(cfg.synthetic_spec(h), cfg.data.n, cfg.data.seed);
  return load_manifest_dataset(cfg.data.manifest, h, cfg.model.encoder.channels, cfg.model.encoder.image_size);
}

inline SplitPlan plan_for(const RunConfig& cfg, std::size_t n) {
  return plan_dataset_split(n, cfg.split.test_fraction, cfg.split.test_seed, cfg.train.ratio, cfg.train.seed);
}

// ---------------------------------------------------------------------------
// gen-data

inline int cmd_gen_data(const fs::path& config, const Overrides& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    auto cfg = load_run_config(config);
    if (o.seed) cfg.data.seed = *o.seed;
    if (cfg.data.kind != DataKind::synthetic) throw ValidationError("gen-data needs a synthetic data source");
    const fs::path dir = o.out ? *o.out : cfg.output / "data";
    const auto h = load_hierarchy(cfg.hierarchy);
    const auto ds = generate_synthetic(cfg.synthetic_spec(h), cfg.data.n, cfg.data.seed);
    dump_dataset(ds, dir);
    out << json{{"samples", ds.size()}, {"manifest", (dir / "manifest.csv").string()}}.dump() << "\n";
    return static_cast<int>(exit_ok);
  });
}

// ---------------------------------------------------------------------------
// Evaluation.

struct Evaluation {
  json metrics;
  Predictions<float> predictions;
};

template <typename T>
Evaluation evaluate(const HelmModel<T>& m, const Dataset& ds, const std::vector<std::size_t>& indices,
                    std::uint64_t seed = 0) {
  if (indices.empty()) throw ValidationError("evaluation set is empty");
  auto p = predict(m, ds, indices);
  const auto leaves = m.leaf_columns();
  MetricRecord r{indices.size(), leaves.size(), {}, {}};
  for (std::size_t i = 0; i < indices.size(); ++i)
    for (auto [col, full] : leaves) {
      r.scores.push_back(p.scores[i * m.labels() + col]);
      r.targets.push_back(ds.samples[indices[i]].labels[full] ? 1 : 0);
    }
  json metrics;
  metrics["n"] = indices.size();
  metrics["auprc"] = auprc(r);
  metrics["ranking_loss"] = ranking_loss(r);
  std::vector<LabelVector> labels;
  for (auto i : indices) labels.push_back(m.project(ds.samples[i].labels));
  try {
    const auto nmi = hierarchical_nmi(p.cls_tokens, labels, m.hierarchy, seed);
    metrics["nmi_per_level"] = nmi.per_level;
    metrics["nmi_mean"] = nmi.mean;
  } catch (const ValidationError&) {
    metrics["nmi_per_level"] = nullptr;
    metrics["nmi_mean"] = nullptr;
  }
  return {metrics, std::move(p)};
}

inline std::string embeddings_csv(const Predictions<float>& p, const std::vector<std::size_t>& ids) {
  std::ostringstream csv;
  csv << std::setprecision(9);
  const std::size_t d = p.pooled.size(1);
  csv << "id";
  for (std::size_t e = 0; e < d; ++e) csv << ",f" << e;
  csv << "\n";
  for (std::size_t i = 0; i < ids.size(); ++i) {
    csv << ids[i];
    for (std::size_t e = 0; e < d; ++e) csv << ',' << p.pooled[i * d + e];
    csv << "\n";
  }
  return csv.str();
}

// ---------------------------------------------------------------------------
// Checkpoints.

template <typename T>
Checkpoint model_checkpoint(const HelmModel<T>& m, const RunConfig& cfg, long step) {
  Checkpoint ck;
  ck.put_store(m.online, "online/");
  ck.put_store(m.target, "target/");
  ck.metadata["config"] = emit_run_config(cfg);
  ck.metadata["hierarchy"] = serialize_hierarchy(m.full_hierarchy);
  ck.metadata["variant"] = variant_name(m.variant);
  ck.metadata["step"] = step;
  return ck;
}

struct LoadedModel {
  RunConfig config;
  HelmModel<float> model;
};

inline LoadedModel load_model(const fs::path& path) {
  const auto ck = load_checkpoint(path);
  if (!ck.metadata.contains("config") || !ck.metadata.contains("hierarchy"))
    throw ValidationError("checkpoint " + path.string() + " lacks config metadata");
  LoadedModel out;
  out.config = parse_run_config(ck.metadata.at("config").get<std::string>());
  const auto h = parse_hierarchy(ck.metadata.at("hierarchy").get<std::string>());
  out.model = make_model<float>(h, out.config.train.variant, out.config.model, out.config.train.seed);
  ck.load_store(out.model.online, "online/");
  ck.load_store(out.model.target, "target/");
  return out;
}

// ---------------------------------------------------------------------------
// train

inline json epoch_json(const EpochRecord& e) {
  return {{"epoch", e.epoch}, {"L_s", e.L_s}, {"L_g", e.L_g},
          {"L_b", e.L_b},     {"L", e.L},     {"lr", e.lr},
          {"param_count", e.param_count}, {"param_breakdown", e.param_breakdown}};
}

inline json step_json(const LossBundle& s) {
  return {{"step", s.step}, {"L_s", s.L_s},     {"L_g", s.L_g},        {"L_b", s.L_b},
          {"L", s.L},       {"lr", s.lr},       {"batch", s.batch},    {"labeled", s.labeled}};
}

struct TrainOutcome {
  fs::path dir;
  json metrics;
};

/// Train per `cfg`, writing config.resolved.yaml, train_log.jsonl,
/// steps.jsonl, timing.jsonl, model.ckpt and metrics.json under cfg.output.
/// Wall-clock measurements go to timing.jsonl and metrics.json only, so the
/// two logs are byte-identical across reruns of the same config.
inline TrainOutcome run_training(const RunConfig& cfg, std::ostream* progress = nullptr) {
  cfg.validate();
  const auto h = load_hierarchy(cfg.hierarchy);
  const auto ds = load_dataset(cfg, h);
  const auto plan = plan_for(cfg, ds.size());
  const fs::path dir = cfg.output;
  fs::create_directories(dir);
  write_file_atomic(dir / "config.resolved.yaml", emit_run_config(cfg));

  std::string epoch_log, step_log, timing_log;
  FitCallbacks cb;
  cb.on_epoch = [&](const EpochRecord& e) {
    epoch_log += epoch_json(e).dump() + "\n";
    timing_log += json{{"epoch", e.epoch}, {"seconds", e.seconds}}.dump() + "\n";
    if (progress) {
      *progress << "epoch " << e.epoch << "/" << cfg.train.epochs << "  L=" << e.L << "  L_s=" << e.L_s
                << "  L_g=" << e.L_g << "  L_b=" << e.L_b << "  (" << e.seconds << " s)\n";
    }
  };
  cb.on_step = [&](const LossBundle& s) { step_log += step_json(s).dump() + "\n"; };
  auto result = fit<float>(ds, plan, cfg.train, cfg.model, cb);
  const auto& m = result.state.model;
  write_file_atomic(dir / "train_log.jsonl", epoch_log);
  write_file_atomic(dir / "steps.jsonl", step_log);
  write_file_atomic(dir / "timing.jsonl", timing_log);
  save_checkpoint(dir / "model.ckpt", model_checkpoint(m, cfg, result.state.step));

  auto metrics = evaluate(m, ds, plan.test, cfg.train.seed).metrics;
  metrics["variant"] = variant_name(cfg.train.variant);
  metrics["ratio"] = cfg.train.ratio;
  metrics["seed"] = cfg.train.seed;
  metrics["epochs"] = cfg.train.epochs;
  metrics["labeled"] = plan.labeled.size();
  metrics["unlabeled"] = plan.unlabeled.size();
  metrics["param_count"] = m.param_count();
  metrics["param_breakdown"] = m.param_breakdown();
  double seconds = 0;
  for (const auto& e : result.epochs) seconds += e.seconds;
  metrics["mean_epoch_seconds"] = result.epochs.empty() ? 0.0 : seconds / static_cast<double>(result.epochs.size());
  write_file_atomic(dir / "metrics.json", metrics.dump(2) + "\n");
  return {dir, metrics};
}

inline int cmd_train(const fs::path& config, const Overrides& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    auto cfg = load_run_config(config);
    apply_overrides(cfg, o);
    const auto outcome = run_training(cfg, &err);
    out << outcome.metrics.dump() << "\n";
    return static_cast<int>(exit_ok);
  });
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  fs::path checkpoint;
  std::optional<fs::path> manifest;
  std::optional<fs::path> hierarchy;
  std::optional<fs::path> out;
  std::optional<fs::path> dump_embeddings;
};

inline int cmd_eval(const EvalOptions& opt, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    auto loaded = load_model(opt.checkpoint);
    const auto& m = loaded.model;
    if (opt.hierarchy) {
      const auto h = load_hierarchy(*opt.hierarchy);
      if (serialize_hierarchy(h) != serialize_hierarchy(m.full_hierarchy))
        throw ValidationError("hierarchy mismatch between checkpoint and " + opt.hierarchy->string());
    }
    Dataset ds;
    std::vector<std::size_t> ids;
    if (opt.manifest) {
      ds = load_manifest_dataset(*opt.manifest, m.full_hierarchy, m.config.encoder.channels, m.config.encoder.image_size);
      for (std::size_t i = 0; i < ds.size(); ++i) ids.push_back(i);
    } else {
      ds = load_dataset(loaded.config, m.full_hierarchy);
      ids = plan_for(loaded.config, ds.size()).test;
    }
    auto ev = evaluate(m, ds, ids, loaded.config.train.seed);
    ev.metrics["variant"] = variant_name(m.variant);
    ev.metrics["ratio"] = loaded.config.train.ratio;
    ev.metrics["seed"] = loaded.config.train.seed;
    if (opt.out) {
      fs::create_directories(*opt.out);
      write_file_atomic(*opt.out / "metrics.json", ev.metrics.dump(2) + "\n");
    }
    if (opt.dump_embeddings) write_file_atomic(*opt.dump_embeddings, embeddings_csv(ev.predictions, ids));
    out << ev.metrics.dump() << "\n";
    return static_cast<int>(exit_ok);
  });
}

// ---------------------------------------------------------------------------
// gradcheck

/// Central-difference check of L_s, L_g, L_b and the composite L on a tiny
/// double-precision HELM model; returns the worst relative error per term.
inline std::map<std::string, double> tiny_gradchecks(std::uint64_t seed, double eps = 1e-5) {
  const auto h = parse_hierarchy("a:\n  - b\n  - c\n");
  ModelConfig mc;
  mc.encoder.image_size = 4;
  mc.encoder.patch_size = 2;
  mc.encoder.embed_dim = 8;
  mc.encoder.depth = 1;
  mc.encoder.heads = 2;
  mc.graph.hidden_dim = 4;
  mc.ssl.hidden = 16;
  mc.ssl.out = 4;
  auto m = make_model<double>(h, Variant::helm, mc, seed);
  Rng rng(derive_seed(seed, 99));
  for (auto& [name, t] : m.online)
    for (auto& v : t.storage()) v += 0.2 * rng.normal();
  m.target = m.online.subset({"encoder.", "projector."}, ParamRole::target);
  for (auto& [name, t] : m.target)
    for (auto& v : t.storage()) v += 0.05 * rng.normal();

  StepBatch<double> batch;
  batch.weak = Tensor<double>({2, 3, 4, 4});
  batch.strong = Tensor<double>(batch.weak.shape());
  for (auto& v : batch.weak.storage()) v = rng.uniform();
  for (auto& v : batch.strong.storage()) v = rng.uniform();
  batch.labels = BatchLabels<double>::from_vectors({ancestor_closure_ids({1}, h), ancestor_closure_ids({2}, h)},
                                                   {true, false}, h.size());

  using Term = std::function<Var<double>(Tape<double>&)>;
  auto part = [&](std::optional<Var<double>> CompositeLoss<double>::*member) -> Term {
    return [&m, &batch, member](Tape<double>& t) {
      auto loss = composite_loss(t, m, batch, {});
      return *(loss.*member);
    };
  };
  const std::map<std::string, Term> terms = {
      {"L_s", part(&CompositeLoss<double>::L_s)},
      {"L_g", part(&CompositeLoss<double>::L_g)},
      {"L_b", part(&CompositeLoss<double>::L_b)},
      {"L", [&](Tape<double>& t) { return composite_loss(t, m, batch, {}).total; }},
  };
  std::map<std::string, double> out;
  for (const auto& [name, f] : terms)
    out[name] = gradcheck<double>([&](Tape<double>& t, const ParameterStore<double>&) { return f(t); }, m.online, eps);
  return out;
}

inline int cmd_gradcheck(std::uint64_t seed, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto errors = tiny_gradchecks(seed);
    double worst = 0;
    for (const auto& [k, v] : errors) worst = std::max(worst, v);
    const bool ok = worst < 1e-3;
    out << json{{"max_rel_error", errors}, {"tolerance", 1e-3}, {"passed", ok}}.dump() << "\n";
    if (!ok) throw NumericError("gradient check failed: max relative error " + std::to_string(worst));
    return static_cast<int>(exit_ok);
  });
}

// ---------------------------------------------------------------------------
// report

inline std::vector<fs::path> expand_globs(const std::vector<std::string>& patterns) {
  std::vector<fs::path> out;
  for (const auto& p : patterns) {
    glob_t g{};
    if (::glob(p.c_str(), 0, nullptr, &g) == 0)
      for (std::size_t i = 0; i < g.gl_pathc; ++i) out.emplace_back(g.gl_pathv[i]);
    globfree(&g);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

struct Summary {
  std::size_t n = 0;
  double mean = 0, std = 0;
};

inline Summary summarize(const std::vector<double>& v) {
  Summary s;
  s.n = v.size();
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

struct ReportTables {
  std::string aggregate, ranks, curves, efficiency;
  std::size_t runs = 0;
};

/// Aggregate metrics.json records per (variant, ratio).
inline ReportTables build_report(const std::vector<json>& runs) {
  if (runs.empty()) throw ValidationError("report: no completed runs found");
  struct Cell {
    std::vector<double> auprc, rl, nmi, seconds;
    std::size_t params = 0;
    std::map<std::string, std::size_t> breakdown;
  };
  std::map<std::string, std::map<double, Cell>> cells;
  for (const auto& r : runs) {
    auto& c = cells[r.at("variant").get<std::string>()][r.at("ratio").get<double>()];
    c.auprc.push_back(r.at("auprc").get<double>());
    c.rl.push_back(r.at("ranking_loss").get<double>());
    if (r.contains("nmi_mean") && r["nmi_mean"].is_number()) c.nmi.push_back(r["nmi_mean"].get<double>());
    if (r.contains("mean_epoch_seconds")) c.seconds.push_back(r["mean_epoch_seconds"].get<double>());
    if (r.contains("param_count")) c.params = r["param_count"].get<std::size_t>();
    if (r.contains("param_breakdown")) c.breakdown = r["param_breakdown"].get<std::map<std::string, std::size_t>>();
  }

  ReportTables t;
  t.runs = runs.size();
  std::ostringstream agg, curves, eff;
  agg << std::setprecision(10);
  curves << std::setprecision(10);
  eff << std::setprecision(10);
  agg << "variant,ratio,runs,auprc_mean,auprc_std,ranking_loss_mean,ranking_loss_std,nmi_mean,nmi_std\n";
  curves << "ratio,variant,mean,std\n";
  eff << "variant,ratio,mean_epoch_seconds,param_count,encoder_params,graph_params\n";
  std::set<double> ratios;
  for (const auto& [variant, by_ratio] : cells)
    for (const auto& [ratio, c] : by_ratio) {
      ratios.insert(ratio);
      const auto a = summarize(c.auprc), rl = summarize(c.rl), nmi = summarize(c.nmi);
      agg << variant << ',' << ratio << ',' << a.n << ',' << a.mean << ',' << a.std << ',' << rl.mean << ',' << rl.std
          << ',';
      if (nmi.n) agg << nmi.mean << ',' << nmi.std;
      else agg << ',';
      agg << "\n";
      curves << ratio << ',' << variant << ',' << a.mean << ',' << a.std << "\n";
      auto part = [&](const char* k) { return c.breakdown.count(k) ? c.breakdown.at(k) : 0; };
      eff << variant << ',' << ratio << ',' << summarize(c.seconds).mean << ',' << c.params << ',' << part("encoder")
          << ',' << part("graph") << "\n";
    }
  t.aggregate = agg.str();
  t.curves = curves.str();
  t.efficiency = eff.str();

  // Ranks over the ratios every variant has results for.
  std::vector<double> complete;
  for (double r : ratios) {
    bool all = true;
    for (const auto& [v, by_ratio] : cells) all = all && by_ratio.count(r);
    if (all) complete.push_back(r);
  }
  std::ostringstream ranks;
  ranks << std::setprecision(10) << "variant,settings,auprc_rank,ranking_loss_rank\n";
  if (!complete.empty()) {
    std::map<std::string, std::vector<double>> by_auprc, by_rl;
    for (const auto& [v, by_ratio] : cells)
      for (double r : complete) {
        by_auprc[v].push_back(summarize(by_ratio.at(r).auprc).mean);
        by_rl[v].push_back(summarize(by_ratio.at(r).rl).mean);
      }
    const auto ra = average_ranks(by_auprc, true), rr = average_ranks(by_rl, false);
    for (const auto& [v, rank] : ra) ranks << v << ',' << complete.size() << ',' << rank << ',' << rr.at(v) << "\n";
  }
  t.ranks = ranks.str();
  return t;
}

inline int cmd_report(const std::vector<std::string>& patterns, const fs::path& out_dir, std::ostream& out,
                      std::ostream& err) {
  return guarded(err, [&] {
    std::vector<json> runs;
    for (const auto& p : expand_globs(patterns)) {
      const auto file = fs::is_directory(p) ? p / "metrics.json" : p;
      if (!fs::is_regular_file(file)) continue;
      try {
        runs.push_back(json::parse(read_file(file)));
      } catch (const json::parse_error& e) {
        throw ValidationError("report: unreadable metrics in " + file.string() + ": " + e.what());
      }
    }
    if (runs.empty()) throw ValidationError("report: no completed runs match the given pattern");
    const auto t = build_report(runs);
    fs::create_directories(out_dir);
    write_file_atomic(out_dir / "aggregate.csv", t.aggregate);
    write_file_atomic(out_dir / "ranks.csv", t.ranks);
    write_file_atomic(out_dir / "curves.csv", t.curves);
    write_file_atomic(out_dir / "efficiency.csv", t.efficiency);
    out << json{{"runs", t.runs}, {"out", out_dir.string()}}.dump() << "\n";
    return static_cast<int>(exit_ok);
  });
}

}  // namespace helm
