#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "helm/commands.hpp"

namespace {

template <typename V>
void optional_flag(CLI::App* app, const std::string& name, std::optional<V>& target, const std::string& help) {
  app->add_option_function<V>(name, [&target](const V& v) { target = v; }, help);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical multi-label classification with label-graph and BYOL branches"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "helm 0.1.0");

  std::string config, hierarchy_path, checkpoint, manifest, hierarchy_override;
  std::optional<std::string> out, dump, variant;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<double> ratio;
  std::vector<std::string> runs;

  auto* vh = app.add_subcommand("validate-hierarchy", "Check a hierarchy YAML file and summarise it");
  vh->add_option("path", hierarchy_path, "Hierarchy YAML file")->required();

  auto* gen = app.add_subcommand("gen-data", "Render the synthetic dataset to PPM files and a manifest");
  gen->add_option("--config", config, "Run config YAML")->required();
  optional_flag(gen, "--seed", seed, "Dataset seed");
  optional_flag(gen, "--out", out, "Output directory");

  auto* train = app.add_subcommand("train", "Train one variant and evaluate it on the test split");
  train->add_option("--config", config, "Run config YAML")->required();
  optional_flag(train, "--seed", seed, "Run seed (label split, init, batches, augmentation)");
  optional_flag(train, "--epochs", epochs, "Training epochs");
  train->add_option_function<std::string>("--variant", [&](const std::string& v) { variant = v; }, "Model variant")
      ->check(CLI::IsMember({"mlc", "hmlc", "helm-g", "helm-b", "helm"}));
  train->add_option_function<double>("--ratio", [&](double r) { ratio = r; }, "Labeled fraction of the training pool")
      ->check(CLI::IsMember({0.01, 0.05, 0.1, 0.25, 1.0}));
  optional_flag(train, "--out", out, "Run directory");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--checkpoint", checkpoint, "model.ckpt written by train")->required();
  ev->add_option("--manifest", manifest, "Evaluate on this manifest instead of the run's test split");
  ev->add_option("--hierarchy", hierarchy_override, "Hierarchy the data is labeled with; must match the checkpoint");
  optional_flag(ev, "--out", out, "Directory for metrics.json");
  optional_flag(ev, "--dump-embeddings", dump, "Write f_CLS embeddings as CSV");

  auto* gc = app.add_subcommand("gradcheck", "Compare analytic and numeric gradients of every loss term");
  optional_flag(gc, "--seed", seed, "Seed for the tiny model");

  auto* rep = app.add_subcommand("report", "Aggregate metrics.json files across runs");
  rep->add_option("runs", runs, "Run directories or metrics.json files (glob patterns allowed)")->required();
  optional_flag(rep, "--out", out, "Output directory for CSV tables");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : helm::exit_validation;
  }

  helm::Overrides o{seed, epochs, variant, ratio, out ? std::optional<helm::fs::path>(*out) : std::nullopt};
  if (*vh) return helm::cmd_validate_hierarchy(hierarchy_path, std::cout, std::cerr);
  if (*gen) return helm::cmd_gen_data(config, o, std::cout, std::cerr);
  if (*train) return helm::cmd_train(config, o, std::cout, std::cerr);
  if (*ev) {
    helm::EvalOptions opt;
    opt.checkpoint = checkpoint;
    if (!manifest.empty()) opt.manifest = manifest;
    if (!hierarchy_override.empty()) opt.hierarchy = hierarchy_override;
    if (out) opt.out = *out;
    if (dump) opt.dump_embeddings = *dump;
    return helm::cmd_eval(opt, std::cout, std::cerr);
  }
  if (*gc) return helm::cmd_gradcheck(seed.value_or(1), std::cout, std::cerr);
  if (*rep) return helm::cmd_report(runs, out.value_or("report"), std::cout, std::cerr);
  return helm::exit_validation;
}
