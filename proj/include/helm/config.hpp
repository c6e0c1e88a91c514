#pragma once

#include <yaml-cpp/yaml.h>

#include <filesystem>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "helm/data.hpp"
#include "helm/io.hpp"
#include "helm/training.hpp"

namespace helm {

enum class DataKind { synthetic, manifest };

struct DataConfig {
  DataKind kind = DataKind::synthetic;
  std::filesystem::path manifest;
  std::size_t n = 1000;
  std::uint64_t seed = 1;
  std::uint64_t motif_seed = 1;
  std::size_t leaves_min = 1, leaves_max = 3;
  double noise_std = 0.05;
  double jitter = 0.0;
  double intensity_min = 1.0;
  double distractor_rate = 0.0;
};

struct SplitConfig {
  double test_fraction = 0.2;
  std::uint64_t test_seed = 1;
};

/// Everything needed to reproduce one training run.
struct RunConfig {
  std::filesystem::path hierarchy;
  DataConfig data;
  SplitConfig split;
  ModelConfig model;
  TrainConfig train;
  std::filesystem::path output = "runs/run";

  void validate() const {
    if (hierarchy.empty()) throw ValidationError("config: hierarchy path is required");
    if (data.kind == DataKind::manifest && data.manifest.empty())
      throw ValidationError("config: data.manifest is required when data.source is manifest");
    if (data.kind == DataKind::synthetic && data.n == 0) throw ValidationError("config: data.n must be positive");
    if (!(split.test_fraction > 0 && split.test_fraction < 1))
      throw ValidationError("config: split.test_fraction must lie in (0, 1)");
    model.graph.validate();
    model.ssl.validate();
    auto enc = model.encoder;
    enc.num_labels = std::max<std::size_t>(enc.num_labels, 1);
    enc.validate();
    train.validate();
  }

  SyntheticSpec synthetic_spec(const LabelHierarchy& h) const {
    SyntheticSpec s;
    s.hierarchy = h;
    s.image_size = model.encoder.image_size;
    s.channels = model.encoder.channels;
    s.leaves_min = data.leaves_min;
    s.leaves_max = data.leaves_max;
    s.noise_std = data.noise_std;
    s.jitter = data.jitter;
    s.intensity_min = data.intensity_min;
    s.distractor_rate = data.distractor_rate;
    s.motifs = default_motifs(h, data.motif_seed);
    return s;
  }
};

namespace detail {

template <typename Policy>
const std::vector<std::pair<const char*, double Policy::*>>& policy_fields() {
  static const std::vector<std::pair<const char*, double Policy::*>> fields = {
      {"hflip_p", &Policy::hflip_p},
      {"vflip_p", &Policy::vflip_p},
      {"blur_p", &Policy::blur_p},
      {"blur_sigma_min", &Policy::blur_sigma_min},
      {"blur_sigma_max", &Policy::blur_sigma_max},
      {"jitter_p", &Policy::jitter_p},
      {"brightness", &Policy::brightness},
      {"contrast", &Policy::contrast},
      {"saturation", &Policy::saturation},
      {"affine_p", &Policy::affine_p},
      {"max_degrees", &Policy::max_degrees},
      {"max_translate", &Policy::max_translate},
      {"scale_min", &Policy::scale_min},
      {"scale_max", &Policy::scale_max},
      {"crop_p", &Policy::crop_p},
      {"crop_scale_min", &Policy::crop_scale_min},
      {"crop_scale_max", &Policy::crop_scale_max},
      {"crop_ratio_min", &Policy::crop_ratio_min},
      {"crop_ratio_max", &Policy::crop_ratio_max},
      {"erase_p", &Policy::erase_p},
      {"erase_scale_min", &Policy::erase_scale_min},
      {"erase_scale_max", &Policy::erase_scale_max},
  };
  return fields;
}

/// A YAML mapping whose keys must all be consumed before finish().
class Section {
 public:
  Section(YAML::Node node, std::string path) : node_(std::move(node)), path_(std::move(path)) {
    if (node_ && !node_.IsNull() && !node_.IsMap()) throw ValidationError("config: '" + path_ + "' must be a mapping");
  }

  bool has(const std::string& key) const { return node_ && node_.IsMap() && node_[key]; }

  template <typename V>
  void get(const std::string& key, V& out) {
    used_.insert(key);
    if (!has(key)) return;
    const auto n = node_[key];
    const auto where = qualified(key);
    try {
      if constexpr (std::is_same_v<V, bool>) {
        out = n.as<bool>();
      } else if constexpr (std::is_same_v<V, std::size_t>) {
        const auto v = n.as<long long>();
        if (v < 0) throw ValidationError("config: '" + where + "' must be non-negative");
        out = static_cast<std::size_t>(v);
      } else if constexpr (std::is_same_v<V, std::filesystem::path>) {
        out = n.as<std::string>();
      } else {
        out = n.as<V>();
      }
    } catch (const YAML::BadConversion&) {
      throw ValidationError("config: '" + where + "' has the wrong type");
    }
  }

  Section child(const std::string& key) {
    used_.insert(key);
    return Section(has(key) ? node_[key] : YAML::Node(), qualified(key));
  }

  void finish() const {
    if (!node_ || !node_.IsMap()) return;
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (!used_.count(key)) throw ValidationError("config: unknown key '" + qualified(key) + "'");
    }
  }

 private:
  std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  YAML::Node node_;
  std::string path_;
  std::set<std::string> used_;
};

inline void read_policy(Section s, AugmentationPolicy& p) {
  for (const auto& [key, member] : policy_fields<AugmentationPolicy>()) s.get(key, p.*member);
  s.finish();
}

inline void write_policy(YAML::Emitter& out, const char* key, const AugmentationPolicy& p) {
  out << YAML::Key << key << YAML::Value << YAML::BeginMap;
  for (const auto& [name, member] : policy_fields<AugmentationPolicy>()) out << YAML::Key << name << YAML::Value << p.*member;
  out << YAML::EndMap;
}

inline std::filesystem::path resolve(const std::filesystem::path& p, const std::filesystem::path& base) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return std::filesystem::weakly_canonical(base / p);
}

}  // namespace detail

/// Parse a run config. Relative hierarchy and manifest paths resolve against
/// `base_dir`; `output` is kept as written.
inline RunConfig parse_run_config(const std::string& text, const std::filesystem::path& base_dir = {}) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ValidationError(std::string("config: malformed YAML: ") + e.what());
  }
  RunConfig c;
  detail::Section top(root, "");
  top.get("hierarchy", c.hierarchy);
  top.get("output", c.output);

  auto data = top.child("data");
  std::string source = "synthetic";
  data.get("source", source);
  if (source == "synthetic") c.data.kind = DataKind::synthetic;
  else if (source == "manifest") c.data.kind = DataKind::manifest;
  else throw ValidationError("config: data.source must be 'synthetic' or 'manifest', got '" + source + "'");
  data.get("manifest", c.data.manifest);
  data.get("n", c.data.n);
  data.get("seed", c.data.seed);
  data.get("motif_seed", c.data.motif_seed);
  data.get("leaves_min", c.data.leaves_min);
  data.get("leaves_max", c.data.leaves_max);
  data.get("noise_std", c.data.noise_std);
  data.get("jitter", c.data.jitter);
  data.get("intensity_min", c.data.intensity_min);
  data.get("distractor_rate", c.data.distractor_rate);
  data.finish();

  auto split = top.child("split");
  split.get("test_fraction", c.split.test_fraction);
  split.get("test_seed", c.split.test_seed);
  split.finish();

  auto model = top.child("model");
  auto& e = c.model.encoder;
  model.get("image_size", e.image_size);
  model.get("patch_size", e.patch_size);
  model.get("channels", e.channels);
  model.get("embed_dim", e.embed_dim);
  model.get("depth", e.depth);
  model.get("heads", e.heads);
  model.get("mlp_ratio", e.mlp_ratio);
  auto graph = model.child("graph");
  graph.get("layers", c.model.graph.layers);
  graph.get("hidden_dim", c.model.graph.hidden_dim);
  graph.get("reverse_edges", c.model.graph.reverse_edges);
  graph.get("self_loops", c.model.graph.self_loops);
  graph.finish();
  auto ssl = model.child("ssl");
  ssl.get("hidden", c.model.ssl.hidden);
  ssl.get("out", c.model.ssl.out);
  ssl.get("tau", c.model.ssl.tau);
  ssl.get("symmetric", c.model.ssl.symmetric);
  std::string pool = c.model.ssl.pool_patches ? "patches" : "cls";
  ssl.get("pool", pool);
  if (pool != "patches" && pool != "cls") throw ValidationError("config: model.ssl.pool must be 'patches' or 'cls'");
  c.model.ssl.pool_patches = pool == "patches";
  ssl.finish();
  model.finish();

  auto train = top.child("train");
  auto& t = c.train;
  std::string variant = variant_name(t.variant);
  train.get("variant", variant);
  t.variant = parse_variant(variant);
  train.get("epochs", t.epochs);
  train.get("batch_size", t.batch_size);
  train.get("base_lr", t.base_lr);
  train.get("ratio", t.ratio);
  train.get("seed", t.seed);
  train.get("labeled_per_batch", t.labeled_per_batch);
  train.get("augment_supervised", t.augment_supervised);
  auto weights = train.child("weights");
  weights.get("s", t.weights.s);
  weights.get("g", t.weights.g);
  weights.get("b", t.weights.b);
  weights.finish();
  auto adamw = train.child("adamw");
  adamw.get("beta1", t.adamw.beta1);
  adamw.get("beta2", t.adamw.beta2);
  adamw.get("eps", t.adamw.eps);
  adamw.get("weight_decay", t.adamw.weight_decay);
  adamw.finish();
  auto augment = train.child("augment");
  detail::read_policy(augment.child("weak"), t.supervised_policy);
  detail::read_policy(augment.child("strong"), t.strong_policy);
  augment.finish();
  train.finish();
  top.finish();

  c.hierarchy = detail::resolve(c.hierarchy, base_dir);
  c.data.manifest = detail::resolve(c.data.manifest, base_dir);
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  return parse_run_config(read_file(path), path.parent_path().empty() ? std::filesystem::current_path()
                                                                      : std::filesystem::absolute(path.parent_path()));
}

/// Every field, doubles at 17 significant digits, so that parsing the
/// result reproduces `c` exactly.
inline std::string emit_run_config(const RunConfig& c) {
  YAML::Emitter out;
  out.SetDoublePrecision(17);
  out << YAML::BeginMap;
  out << YAML::Key << "hierarchy" << YAML::Value << c.hierarchy.string();
  out << YAML::Key << "output" << YAML::Value << c.output.string();

  out << YAML::Key << "data" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "source" << YAML::Value << (c.data.kind == DataKind::synthetic ? "synthetic" : "manifest");
  if (c.data.kind == DataKind::manifest) out << YAML::Key << "manifest" << YAML::Value << c.data.manifest.string();
  out << YAML::Key << "n" << YAML::Value << c.data.n;
  out << YAML::Key << "seed" << YAML::Value << c.data.seed;
  out << YAML::Key << "motif_seed" << YAML::Value << c.data.motif_seed;
  out << YAML::Key << "leaves_min" << YAML::Value << c.data.leaves_min;
  out << YAML::Key << "leaves_max" << YAML::Value << c.data.leaves_max;
  out << YAML::Key << "noise_std" << YAML::Value << c.data.noise_std;
  out << YAML::Key << "jitter" << YAML::Value << c.data.jitter;
  out << YAML::Key << "intensity_min" << YAML::Value << c.data.intensity_min;
  out << YAML::Key << "distractor_rate" << YAML::Value << c.data.distractor_rate;
  out << YAML::EndMap;

  out << YAML::Key << "split" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "test_fraction" << YAML::Value << c.split.test_fraction;
  out << YAML::Key << "test_seed" << YAML::Value << c.split.test_seed;
  out << YAML::EndMap;

  const auto& e = c.model.encoder;
  out << YAML::Key << "model" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "image_size" << YAML::Value << e.image_size;
  out << YAML::Key << "patch_size" << YAML::Value << e.patch_size;
  out << YAML::Key << "channels" << YAML::Value << e.channels;
  out << YAML::Key << "embed_dim" << YAML::Value << e.embed_dim;
  out << YAML::Key << "depth" << YAML::Value << e.depth;
  out << YAML::Key << "heads" << YAML::Value << e.heads;
  out << YAML::Key << "mlp_ratio" << YAML::Value << e.mlp_ratio;
  out << YAML::Key << "graph" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "layers" << YAML::Value << c.model.graph.layers;
  out << YAML::Key << "hidden_dim" << YAML::Value << c.model.graph.hidden_dim;
  out << YAML::Key << "reverse_edges" << YAML::Value << c.model.graph.reverse_edges;
  out << YAML::Key << "self_loops" << YAML::Value << c.model.graph.self_loops;
  out << YAML::EndMap;
  out << YAML::Key << "ssl" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "hidden" << YAML::Value << c.model.ssl.hidden;
  out << YAML::Key << "out" << YAML::Value << c.model.ssl.out;
  out << YAML::Key << "tau" << YAML::Value << c.model.ssl.tau;
  out << YAML::Key << "symmetric" << YAML::Value << c.model.ssl.symmetric;
  out << YAML::Key << "pool" << YAML::Value << (c.model.ssl.pool_patches ? "patches" : "cls");
  out << YAML::EndMap;
  out << YAML::EndMap;

  const auto& t = c.train;
  out << YAML::Key << "train" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "variant" << YAML::Value << variant_name(t.variant);
  out << YAML::Key << "epochs" << YAML::Value << t.epochs;
  out << YAML::Key << "batch_size" << YAML::Value << t.batch_size;
  out << YAML::Key << "base_lr" << YAML::Value << t.base_lr;
  out << YAML::Key << "ratio" << YAML::Value << t.ratio;
  out << YAML::Key << "seed" << YAML::Value << t.seed;
  out << YAML::Key << "labeled_per_batch" << YAML::Value << t.labeled_per_batch;
  out << YAML::Key << "augment_supervised" << YAML::Value << t.augment_supervised;
  out << YAML::Key << "weights" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "s" << YAML::Value << t.weights.s;
  out << YAML::Key << "g" << YAML::Value << t.weights.g;
  out << YAML::Key << "b" << YAML::Value << t.weights.b;
  out << YAML::EndMap;
  out << YAML::Key << "adamw" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "beta1" << YAML::Value << t.adamw.beta1;
  out << YAML::Key << "beta2" << YAML::Value << t.adamw.beta2;
  out << YAML::Key << "eps" << YAML::Value << t.adamw.eps;
  out << YAML::Key << "weight_decay" << YAML::Value << t.adamw.weight_decay;
  out << YAML::EndMap;
  out << YAML::Key << "augment" << YAML::Value << YAML::BeginMap;
  detail::write_policy(out, "weak", t.supervised_policy);
  detail::write_policy(out, "strong", t.strong_policy);
  out << YAML::EndMap;
  out << YAML::EndMap;

  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

}  // namespace helm
