#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "helm/commands.hpp"

namespace helm {
namespace {

const fs::path config_dir = HELM_CONFIG_DIR;

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("helm_cli_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

RunConfig tiny_run(const fs::path& out) {
  auto c = load_run_config(config_dir / "smoke.yaml");
  c.data.n = 40;
  c.model.encoder.image_size = 8;
  c.model.encoder.patch_size = 4;
  c.model.encoder.embed_dim = 8;
  c.train.batch_size = 4;
  c.train.labeled_per_batch = 1;
  c.output = out;
  return c;
}

// ---------------------------------------------------------------------------

TEST(RunConfig, EmitParseRoundTrip) {
  RunConfig c;
  c.hierarchy = "/x/h.yaml";
  c.data.n = 123;
  c.data.noise_std = 0.1 + 0.2;
  c.data.jitter = 1.0 / 3.0;
  c.split.test_fraction = 0.3;
  c.model.encoder.embed_dim = 16;
  c.model.graph.reverse_edges = false;
  c.model.ssl.pool_patches = false;
  c.model.ssl.tau = 0.99;
  c.train.variant = Variant::helm_b;
  c.train.base_lr = 3e-3;
  c.train.weights = {0.5, 2.0, 1.0 / 7.0};
  c.train.strong_policy.erase_p = 0.123456789;
  c.train.labeled_per_batch = 4;
  c.output = "runs/x";
  const auto text = emit_run_config(c);
  const auto back = parse_run_config(text);
  EXPECT_EQ(emit_run_config(back), text);
  EXPECT_EQ(back.data.noise_std, c.data.noise_std);
  EXPECT_EQ(back.train.weights.b, c.train.weights.b);
  EXPECT_EQ(back.train.variant, Variant::helm_b);
  EXPECT_FALSE(back.model.ssl.pool_patches);
  EXPECT_EQ(back.output, fs::path("runs/x"));
}

TEST(RunConfig, ShippedConfigsParse) {
  for (const char* name : {"desk.yaml", "smoke.yaml"}) {
    const auto c = load_run_config(config_dir / name);
    EXPECT_TRUE(c.hierarchy.is_absolute()) << name;
    EXPECT_TRUE(fs::exists(c.hierarchy)) << name;
  }
  const auto desk = load_run_config(config_dir / "desk.yaml");
  EXPECT_EQ(desk.data.n, 1000u);
  EXPECT_EQ(desk.train.supervised_policy.hflip_p, 0.0);
}

TEST(RunConfig, DefaultsFillMissingSections) {
  const auto c = parse_run_config("hierarchy: h.yaml\n", "/base");
  EXPECT_EQ(c.hierarchy, fs::path("/base/h.yaml"));
  EXPECT_EQ(c.data.kind, DataKind::synthetic);
  EXPECT_EQ(c.train.batch_size, TrainConfig{}.batch_size);
}

TEST(RunConfig, RejectsUnknownKeys) {
  for (const char* text : {"bogus: 1\n", "data:\n  nn: 5\n", "model:\n  graph:\n    width: 3\n",
                           "train:\n  augment:\n    weak:\n      flip: 0.5\n"}) {
    try {
      parse_run_config(text);
      ADD_FAILURE() << text;
    } catch (const ValidationError& e) {
      EXPECT_NE(std::string(e.what()).find("unknown key"), std::string::npos) << e.what();
    }
  }
}

TEST(RunConfig, RejectsBadValues) {
  auto with_hierarchy = [](const std::string& text) { return "hierarchy: h.yaml\n" + text; };
  EXPECT_THROW(parse_run_config("data:\n  n: 5\n"), ValidationError);
  EXPECT_THROW(parse_run_config(with_hierarchy("data:\n  n: many\n")), ValidationError);
  EXPECT_THROW(parse_run_config(with_hierarchy("data:\n  n: -4\n")), ValidationError);
  EXPECT_THROW(parse_run_config(with_hierarchy("data:\n  source: web\n")), ValidationError);
  EXPECT_THROW(parse_run_config(with_hierarchy("train:\n  variant: big\n")), ValidationError);
  EXPECT_THROW(parse_run_config(with_hierarchy("train:\n  ratio: 0\n")), ValidationError);
  EXPECT_THROW(parse_run_config(with_hierarchy("model:\n  heads: 3\n")), ValidationError);
  EXPECT_THROW(parse_run_config(with_hierarchy("model:\n  ssl:\n    pool: mean\n")), ValidationError);
  EXPECT_THROW(parse_run_config(with_hierarchy("train: [1, 2]\n")), ValidationError);
  EXPECT_THROW(parse_run_config(with_hierarchy("a: [\n")), ValidationError);
}

TEST(RunConfig, Overrides) {
  RunConfig c;
  c.hierarchy = "h.yaml";
  apply_overrides(c, {7, 3, "hmlc", 0.25, fs::path("o")});
  EXPECT_EQ(c.train.seed, 7u);
  EXPECT_EQ(c.train.epochs, 3u);
  EXPECT_EQ(c.train.variant, Variant::hmlc);
  EXPECT_EQ(c.train.ratio, 0.25);
  EXPECT_EQ(c.output, fs::path("o"));
  EXPECT_THROW(apply_overrides(c, {{}, {}, {}, 0.3, {}}), ValidationError);
  EXPECT_THROW(apply_overrides(c, {{}, {}, "helm_x", {}, {}}), ValidationError);
}

// ---------------------------------------------------------------------------

TEST(ValidateHierarchy, SummaryAndExitCodes) {
  std::ostringstream out, err;
  EXPECT_EQ(cmd_validate_hierarchy(config_dir / "hierarchies/ucm.yaml", out, err), 0);
  const auto j = json::parse(out.str());
  EXPECT_EQ(j["M"], 30);
  EXPECT_EQ(j["levels"], json({4, 9, 17}));
  EXPECT_EQ(j["leaves"], 17);

  const auto dir = scratch("vh");
  write_file_atomic(dir / "cyc.yaml", "a:\n  - b\nb:\n  - a\n");
  std::ostringstream out2, err2;
  EXPECT_EQ(cmd_validate_hierarchy(dir / "cyc.yaml", out2, err2), 2);
  const auto bad = json::parse(out2.str());
  EXPECT_FALSE(bad["valid"].get<bool>());
  EXPECT_NE(bad["errors"][0].get<std::string>().find("cycle detected"), std::string::npos);

  std::ostringstream out3, err3;
  EXPECT_EQ(cmd_validate_hierarchy(dir / "missing.yaml", out3, err3), 1);
}

TEST(Guarded, MapsErrorFamilies) {
  std::ostringstream err;
  EXPECT_EQ(guarded(err, [] { return 0; }), 0);
  EXPECT_EQ(guarded(err, []() -> int { throw IoError("x"); }), 1);
  EXPECT_EQ(guarded(err, []() -> int { throw ValidationError("x"); }), 2);
  EXPECT_EQ(guarded(err, []() -> int { throw NumericError("x"); }), 3);
}

TEST(Train, WritesArtifactsAndReproduces) {
  const auto dir = scratch("train");
  auto cfg = tiny_run(dir / "a");
  const auto first = run_training(cfg);
  for (const char* f : {"config.resolved.yaml", "train_log.jsonl", "steps.jsonl", "timing.jsonl", "model.ckpt", "metrics.json"})
    EXPECT_TRUE(fs::exists(dir / "a" / f)) << f;
  EXPECT_EQ(first.metrics["variant"], "helm");
  EXPECT_GE(first.metrics["auprc"].get<double>(), 0.0);

  // Re-feeding the resolved snapshot reproduces the step log and metrics.
  auto again = load_run_config(dir / "a" / "config.resolved.yaml");
  again.output = dir / "b";
  const auto second = run_training(again);
  for (const char* f : {"steps.jsonl", "train_log.jsonl"}) EXPECT_EQ(read_file(dir / "a" / f), read_file(dir / "b" / f)) << f;
  for (const char* k : {"auprc", "ranking_loss", "nmi_mean", "param_count"}) EXPECT_EQ(first.metrics[k], second.metrics[k]);
}

TEST(Train, HmlcLogsZeroAuxiliaryLosses) {
  const auto dir = scratch("hmlc");
  auto cfg = tiny_run(dir);
  cfg.train.variant = Variant::hmlc;
  cfg.train.epochs = 2;
  run_training(cfg);
  std::istringstream log(read_file(dir / "train_log.jsonl"));
  std::string line;
  int epochs = 0;
  while (std::getline(log, line)) {
    const auto j = json::parse(line);
    EXPECT_EQ(j["L_g"].get<double>(), 0.0);
    EXPECT_EQ(j["L_b"].get<double>(), 0.0);
    ++epochs;
  }
  EXPECT_EQ(epochs, 2);
}

TEST(Eval, ReloadsCheckpointAndDumpsEmbeddings) {
  const auto dir = scratch("eval");
  auto cfg = tiny_run(dir / "run");
  const auto trained = run_training(cfg);

  EvalOptions opt;
  opt.checkpoint = dir / "run" / "model.ckpt";
  opt.dump_embeddings = dir / "emb.csv";
  opt.out = dir / "eval";
  std::ostringstream out, err;
  ASSERT_EQ(cmd_eval(opt, out, err), 0) << err.str();
  const auto j = json::parse(out.str());
  EXPECT_EQ(j["auprc"], trained.metrics["auprc"]);
  EXPECT_EQ(j["ranking_loss"], trained.metrics["ranking_loss"]);

  std::istringstream csv(read_file(dir / "emb.csv"));
  std::string line;
  std::size_t rows = 0;
  while (std::getline(csv, line)) {
    EXPECT_EQ(static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')), cfg.model.encoder.embed_dim);
    ++rows;
  }
  EXPECT_EQ(rows, j["n"].get<std::size_t>() + 1);

  opt.dump_embeddings.reset();
  opt.hierarchy = config_dir / "hierarchies/ucm.yaml";
  std::ostringstream out2, err2;
  EXPECT_EQ(cmd_eval(opt, out2, err2), 2);
  opt.hierarchy.reset();
  opt.checkpoint = dir / "nothing.ckpt";
  EXPECT_EQ(cmd_eval(opt, out2, err2), 1);
}

TEST(Eval, ManifestInput) {
  const auto dir = scratch("manifest");
  auto cfg = tiny_run(dir / "run");
  cfg.train.epochs = 1;
  run_training(cfg);
  const auto h = load_hierarchy(cfg.hierarchy);
  dump_dataset(generate_synthetic(cfg.synthetic_spec(h), 12, 5), dir / "data");
  EvalOptions opt;
  opt.checkpoint = dir / "run" / "model.ckpt";
  opt.manifest = dir / "data" / "manifest.csv";
  opt.hierarchy = cfg.hierarchy;
  std::ostringstream out, err;
  ASSERT_EQ(cmd_eval(opt, out, err), 0) << err.str();
  EXPECT_EQ(json::parse(out.str())["n"], 12);
}

TEST(Gradcheck, AllTermsPass) {
  for (const auto& [term, e] : tiny_gradchecks(3)) EXPECT_LT(e, 1e-3) << term;
}

// ---------------------------------------------------------------------------

json fake_run(const std::string& variant, double ratio, double auprc, double rl) {
  return {{"variant", variant}, {"ratio", ratio},         {"auprc", auprc},
          {"ranking_loss", rl}, {"nmi_mean", 0.5},        {"mean_epoch_seconds", 1.0},
          {"param_count", 10},  {"param_breakdown", {{"encoder", 8}, {"graph", 2}}}};
}

TEST(Report, ThreeSeedsGiveOneRowWithSpread) {
  const auto t = build_report({fake_run("helm", 0.05, 0.5, 0.2), fake_run("helm", 0.05, 0.6, 0.1),
                               fake_run("helm", 0.05, 0.7, 0.3)});
  std::istringstream rows(t.aggregate);
  std::string header, row, extra;
  std::getline(rows, header);
  std::getline(rows, row);
  EXPECT_FALSE(std::getline(rows, extra));
  EXPECT_EQ(row.rfind("helm,0.05,3,0.6,0.1", 0), 0u) << row;
  EXPECT_NE(t.curves.find("0.05,helm,0.6,0.1"), std::string::npos) << t.curves;
}

TEST(Report, RankTableOverCompleteSettings) {
  std::vector<json> runs;
  const std::vector<std::string> variants = {"hmlc", "helm-g", "helm-b", "helm"};
  for (double r : {0.01, 0.05, 0.1, 0.25})
    for (std::size_t v = 0; v < variants.size(); ++v)
      runs.push_back(fake_run(variants[v], r, 0.5 + 0.1 * static_cast<double>(v), 0.5 - 0.1 * static_cast<double>(v)));
  runs.push_back(fake_run("helm", 1.0, 0.9, 0.1));  // incomplete setting, excluded from ranks
  const auto t = build_report(runs);
  EXPECT_NE(t.ranks.find("helm,4,1,1"), std::string::npos) << t.ranks;
  EXPECT_NE(t.ranks.find("hmlc,4,4,4"), std::string::npos) << t.ranks;
}

TEST(Report, EmptyGlobExitsWithValidationCode) {
  const auto dir = scratch("report");
  std::ostringstream out, err;
  EXPECT_EQ(cmd_report({(dir / "nothing*").string()}, dir / "out", out, err), 2);

  write_file_atomic(dir / "r1" / "metrics.json", fake_run("helm", 0.05, 0.5, 0.2).dump());
  write_file_atomic(dir / "r2" / "metrics.json", fake_run("hmlc", 0.05, 0.4, 0.3).dump());
  EXPECT_EQ(cmd_report({(dir / "r*").string()}, dir / "out", out, err), 0) << err.str();
  for (const char* f : {"aggregate.csv", "ranks.csv", "curves.csv", "efficiency.csv"})
    EXPECT_TRUE(fs::exists(dir / "out" / f)) << f;
}

}  // namespace
}  // namespace helm
