#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "helm/errors.hpp"
#include "helm/hierarchy.hpp"
#include "helm/io.hpp"
#include "helm/numerics/checkpoint.hpp"
#include "helm/parallel.hpp"
#include "helm/random.hpp"

namespace helm {

/// One image ([C, H, W], values in [0, 1]) with its ancestor-closed labels.
struct Sample {
  Tensor<float> image;
  LabelVector labels;
};

struct Dataset {
  LabelHierarchy hierarchy;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
};

/// Visual motif for one leaf: a textured block in a fixed grid slot.
struct Motif {
  std::size_t slot_y = 0, slot_x = 0;
  double color[3] = {0, 0, 0};
  double frequency = 1;  // stripe cycles across the block
  bool vertical = false;
};

struct SyntheticSpec {
  LabelHierarchy hierarchy;
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t leaves_min = 1, leaves_max = 3;
  double noise_std = 0.05;
  double jitter = 0.0;          // max block offset as a fraction of the slot size
  double intensity_min = 1.0;   // per-motif brightness drawn in [intensity_min, 1]
  double distractor_rate = 0.0; // expected unlabeled clutter blocks per image
  std::vector<Motif> motifs;    // indexed like hierarchy.leaves()

  std::size_t slots_per_side() const {
    return static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(hierarchy.leaves().size()))));
  }
};

namespace detail {

inline void hsv_to_rgb(double h, double s, double v, double out[3]) {
  h = h - std::floor(h);
  const double i = std::floor(h * 6), f = h * 6 - i;
  const double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
  const int k = static_cast<int>(i) % 6;
  const double table[6][3] = {{v, t, p}, {q, v, p}, {p, v, t}, {p, q, v}, {t, p, v}, {v, p, q}};
  std::copy(table[k], table[k] + 3, out);
}

}  // namespace detail

/// Default motif table: every leaf gets its own slot; leaves under the same
/// level-1 ancestor share a hue family, siblings share a closer hue, and each
/// leaf has its own stripe frequency and orientation.
inline std::vector<Motif> default_motifs(const LabelHierarchy& h, std::uint64_t seed) {
  const auto& leaves = h.leaves();
  const std::size_t g = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(leaves.size()))));
  std::vector<std::size_t> slots(g * g);
  for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = i;
  Rng rng(derive_seed(seed, 0x6d6f746966ULL));
  rng.shuffle(slots.begin(), slots.end());

  const auto roots = h.level_sizes()[0];
  std::vector<Motif> out(leaves.size());
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    const auto leaf = leaves[i];
    const auto root = h.ancestor_at(leaf, 1);
    const auto parent = h.parent(leaf).value_or(leaf);
    const auto siblings = h.parent(leaf) ? h.children(*h.parent(leaf)) : std::vector<std::size_t>{leaf};
    const auto rank = static_cast<double>(std::find(siblings.begin(), siblings.end(), leaf) - siblings.begin());
    const double family = static_cast<double>(root) / static_cast<double>(roots);
    const double branch = 0.08 * static_cast<double>(parent % 3);
    detail::hsv_to_rgb(family + branch + 0.03 * rank, 0.85, 0.95, out[i].color);
    out[i].slot_y = slots[i] / g;
    out[i].slot_x = slots[i] % g;
    out[i].frequency = 1.0 + static_cast<double>(i % 4);
    out[i].vertical = (i / 4) % 2 == 1;
  }
  return out;
}

/// Render one sample. Deterministic in (spec, seed).
inline Sample render_synthetic(const SyntheticSpec& spec, const std::vector<std::size_t>& leaf_idx, std::uint64_t seed) {
  const std::size_t n = spec.image_size, c = spec.channels, g = spec.slots_per_side();
  const std::size_t cell = n / g;
  if (cell < 2) throw ValidationError("image too small for " + std::to_string(spec.hierarchy.leaves().size()) + " motifs");
  Rng rng(seed);
  Tensor<float> img({c, n, n});
  const std::size_t block = std::max<std::size_t>(2, cell * 3 / 4);
  auto paint = [&](const Motif& m, double intensity) {
    const double slack = static_cast<double>(cell - block);
    const double jit = spec.jitter * static_cast<double>(cell);
    auto offset = [&](std::size_t slot) {
      const double base = static_cast<double>(slot * cell) + slack / 2 + rng.uniform(-jit, jit);
      return static_cast<long>(std::lround(std::clamp(base, 0.0, static_cast<double>(n - block))));
    };
    const long oy = offset(m.slot_y), ox = offset(m.slot_x);
    for (std::size_t y = 0; y < block; ++y)
      for (std::size_t x = 0; x < block; ++x) {
        const double u = static_cast<double>(m.vertical ? x : y) / static_cast<double>(block);
        const double tex = 0.55 + 0.45 * std::cos(2 * std::numbers::pi * m.frequency * u);
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double col = c == 3 ? m.color[ch] : (m.color[0] + m.color[1] + m.color[2]) / 3;
          auto& px = img[(ch * n + static_cast<std::size_t>(oy) + y) * n + static_cast<std::size_t>(ox) + x];
          px = static_cast<float>(intensity * col * tex);
        }
      }
  };
  for (auto i : leaf_idx) paint(spec.motifs.at(i), rng.uniform(spec.intensity_min, 1.0));
  if (spec.distractor_rate > 0) {
    // clutter: grey textured blocks at random slots carry no label
    const auto count = static_cast<std::size_t>(std::floor(spec.distractor_rate + rng.uniform()));
    for (std::size_t k = 0; k < count; ++k) {
      Motif m;
      m.slot_y = rng.below(g);
      m.slot_x = rng.below(g);
      const double v = rng.uniform(0.3, 0.7);
      m.color[0] = m.color[1] = m.color[2] = v;
      m.frequency = 1.0 + static_cast<double>(rng.below(4));
      m.vertical = rng.bernoulli(0.5);
      paint(m, 1.0);
    }
  }
  if (spec.noise_std > 0)
    for (auto& px : img.storage()) px = static_cast<float>(px + spec.noise_std * rng.normal());
  for (auto& px : img.storage()) px = std::clamp(px, 0.0f, 1.0f);
  return Sample{std::move(img), {}};
}

/// n samples, each with k ~ U{leaves_min..leaves_max} distinct leaves, labels
/// closed under ancestors. Sample i depends only on (spec, seed, i).
inline Dataset generate_synthetic(const SyntheticSpec& spec, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ValidationError("generate_synthetic needs n >= 1");
  const auto& leaves = spec.hierarchy.leaves();
  if (spec.motifs.size() != leaves.size())
    throw ValidationError("motif table incomplete: " + std::to_string(spec.motifs.size()) + " motifs for " +
                          std::to_string(leaves.size()) + " leaves");
  for (std::size_t i = 0; i < spec.motifs.size(); ++i)
    for (std::size_t j = i + 1; j < spec.motifs.size(); ++j)
      if (spec.motifs[i].slot_y == spec.motifs[j].slot_y && spec.motifs[i].slot_x == spec.motifs[j].slot_x)
        throw ValidationError("two leaves share a motif location");
  if (spec.leaves_min < 1 || spec.leaves_min > spec.leaves_max) throw ValidationError("bad leaves_per_sample range");
  if (spec.channels == 0 || spec.image_size == 0) throw ValidationError("image dims must be positive");

  Dataset ds{spec.hierarchy, std::vector<Sample>(n)};
  parallel_for(n, [&](std::size_t i) {
    Rng rng(derive_seed(seed, i, 1));
    const auto hi = std::min(spec.leaves_max, leaves.size());
    const auto lo = std::min(spec.leaves_min, hi);
    const auto k = static_cast<std::size_t>(rng.between(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi)));
    std::vector<std::size_t> order(leaves.size());
    for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
    rng.shuffle(order.begin(), order.end());
    order.resize(k);
    std::sort(order.begin(), order.end());
    std::vector<std::size_t> ids;
    for (auto j : order) ids.push_back(leaves[j]);
    ds.samples[i] = render_synthetic(spec, order, derive_seed(seed, i, 2));
    ds.samples[i].labels = ancestor_closure_ids(ids, spec.hierarchy);
  });
  return ds;
}

// ---------------------------------------------------------------------------
// Splits.

struct SplitPlan {
  std::vector<std::size_t> labeled, unlabeled, test;
  double ratio = 1.0;
  std::uint64_t seed = 0;

  std::size_t pool_size() const { return labeled.size() + unlabeled.size(); }
};

inline std::size_t labeled_count(std::size_t n_train, double ratio) {
  const auto k = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n_train) + 1e-9));
  return std::clamp<std::size_t>(k, 1, n_train);
}

/// Labeled/unlabeled partition of train pool indices 0..n_train-1.
inline SplitPlan make_split(std::size_t n_train, double ratio, std::uint64_t seed) {
  if (n_train == 0) throw ValidationError("make_split needs a non-empty train pool");
  if (!(ratio > 0 && ratio <= 1)) throw ValidationError("labeled ratio must lie in (0, 1]");
  std::vector<std::size_t> idx(n_train);
  for (std::size_t i = 0; i < n_train; ++i) idx[i] = i;
  Rng rng(derive_seed(seed, 0x73706c6974ULL));
  rng.shuffle(idx.begin(), idx.end());
  const auto k = labeled_count(n_train, ratio);
  SplitPlan plan;
  plan.labeled.assign(idx.begin(), idx.begin() + static_cast<long>(k));
  plan.unlabeled.assign(idx.begin() + static_cast<long>(k), idx.end());
  std::sort(plan.labeled.begin(), plan.labeled.end());
  std::sort(plan.unlabeled.begin(), plan.unlabeled.end());
  plan.ratio = ratio;
  plan.seed = seed;
  return plan;
}

/// Full split over a dataset of n items: the test set depends on
/// `test_seed` only, so it is shared by every ratio and training seed.
inline SplitPlan plan_dataset_split(std::size_t n, double test_fraction, std::uint64_t test_seed, double ratio,
                                    std::uint64_t seed) {
  if (!(test_fraction > 0 && test_fraction < 1)) throw ValidationError("test_fraction must lie in (0, 1)");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(derive_seed(test_seed, 0x74657374ULL));
  rng.shuffle(idx.begin(), idx.end());
  const auto n_test = static_cast<std::size_t>(std::floor(test_fraction * static_cast<double>(n)));
  if (n_test == 0 || n_test >= n) throw ValidationError("dataset too small for a test split");
  std::vector<std::size_t> test(idx.begin(), idx.begin() + static_cast<long>(n_test));
  std::vector<std::size_t> pool(idx.begin() + static_cast<long>(n_test), idx.end());
  std::sort(test.begin(), test.end());
  std::sort(pool.begin(), pool.end());
  auto plan = make_split(pool.size(), ratio, seed);
  for (auto& i : plan.labeled) i = pool[i];
  for (auto& i : plan.unlabeled) i = pool[i];
  plan.test = std::move(test);
  return plan;
}

// ---------------------------------------------------------------------------
// Image files: binary PPM (P6) / PGM (P5), or a .tensor container holding a
// single [C, H, W] tensor named "image".

namespace detail {

inline Tensor<float> resize_bilinear(const Tensor<float>& img, std::size_t size) {
  const std::size_t c = img.size(0), h = img.size(1), w = img.size(2);
  if (h == size && w == size) return img;
  Tensor<float> out({c, size, size});
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double sy = std::clamp((static_cast<double>(y) + 0.5) * static_cast<double>(h) / static_cast<double>(size) - 0.5,
                                   0.0, static_cast<double>(h - 1));
      const double sx = std::clamp((static_cast<double>(x) + 0.5) * static_cast<double>(w) / static_cast<double>(size) - 0.5,
                                   0.0, static_cast<double>(w - 1));
      const auto y0 = static_cast<std::size_t>(sy), x0 = static_cast<std::size_t>(sx);
      const auto y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
      const double dy = sy - static_cast<double>(y0), dx = sx - static_cast<double>(x0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        auto at = [&](std::size_t yy, std::size_t xx) { return static_cast<double>(img[(ch * h + yy) * w + xx]); };
        out[(ch * size + y) * size + x] = static_cast<float>((1 - dy) * ((1 - dx) * at(y0, x0) + dx * at(y0, x1)) +
                                                             dy * ((1 - dx) * at(y1, x0) + dx * at(y1, x1)));
      }
    }
  return out;
}

inline Tensor<float> decode_netpbm(const std::string& bytes, const std::string& path) {
  std::istringstream in(bytes);
  std::string magic;
  in >> magic;
  if (magic != "P5" && magic != "P6") throw IoError("unsupported image format in " + path);
  auto next_int = [&]() {
    long v = -1;
    while (in >> std::ws && in.peek() == '#') in.ignore(1 << 20, '\n');
    in >> v;
    return v;
  };
  const long w = next_int(), h = next_int(), maxval = next_int();
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) throw IoError("bad image header in " + path);
  in.get();
  const std::size_t c = magic == "P6" ? 3 : 1;
  const auto count = c * static_cast<std::size_t>(w * h);
  std::string raw(count, '\0');
  if (!in.read(raw.data(), static_cast<long>(count))) throw IoError("truncated image data in " + path);
  Tensor<float> img({c, static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  for (std::size_t i = 0; i < static_cast<std::size_t>(w * h); ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      img[ch * static_cast<std::size_t>(w * h) + i] =
          static_cast<float>(static_cast<unsigned char>(raw[i * c + ch])) / static_cast<float>(maxval);
  return img;
}

}  // namespace detail

inline void save_tensor_image(const std::filesystem::path& path, const Tensor<float>& img) {
  Checkpoint ck;
  ck.put("image", img);
  save_checkpoint(path, ck);
}

/// Load an image as [channels, size, size] in [0, 1]. Greyscale inputs are
/// replicated to 3 channels when needed; other sizes are resampled bilinearly.
inline Tensor<float> load_image(const std::filesystem::path& path, std::size_t channels, std::size_t size) {
  Tensor<float> img;
  const auto ext = path.extension().string();
  if (ext == ".tensor") {
    try {
      img = load_checkpoint(path).get<float>("image");
    } catch (const ValidationError& e) {
      throw IoError("unreadable image " + path.string() + ": " + e.what());
    }
  } else if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") {
    img = detail::decode_netpbm(read_file(path), path.string());
  } else {
    throw IoError("unreadable image " + path.string() + ": unsupported extension");
  }
  if (img.dim() != 3) throw IoError("image " + path.string() + " is not [C, H, W]");
  if (img.size(0) == 1 && channels == 3) {
    Tensor<float> rgb({3, img.size(1), img.size(2)});
    for (std::size_t ch = 0; ch < 3; ++ch)
      std::copy(img.storage().begin(), img.storage().end(), rgb.storage().begin() + static_cast<long>(ch * img.numel()));
    img = std::move(rgb);
  }
  if (img.size(0) != channels) throw ValidationError("image " + path.string() + " has wrong channel count");
  return detail::resize_bilinear(img, size);
}

// ---------------------------------------------------------------------------
// Manifest CSV: image_path,leaf_labels with leaf names separated by ';'.

struct ManifestRow {
  std::filesystem::path image;
  std::vector<std::string> leaves;
  LabelVector labels;
};

struct Manifest {
  std::vector<ManifestRow> rows;
  std::vector<std::string> warnings;
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Parse manifest text. Relative image paths resolve against `base_dir`.
inline Manifest parse_manifest(const std::string& text, const LabelHierarchy& h, const std::filesystem::path& base_dir,
                               bool check_files = true) {
  Manifest out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line_no == 1 && line.rfind("image_path", 0) == 0) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos || line.find(',', comma + 1) != std::string::npos)
      throw ValidationError("malformed manifest row " + std::to_string(line_no) + ": expected 2 columns");
    const auto path = detail::trim(line.substr(0, comma));
    const auto field = detail::trim(line.substr(comma + 1));
    if (path.empty()) throw ValidationError("malformed manifest row " + std::to_string(line_no) + ": empty image path");
    std::vector<std::string> names;
    std::stringstream ls(field);
    std::string item;
    bool dup = false;
    while (std::getline(ls, item, ';')) {
      item = detail::trim(item);
      if (item.empty()) continue;
      if (std::find(names.begin(), names.end(), item) != names.end()) {
        dup = true;
        continue;
      }
      names.push_back(item);
    }
    if (names.empty()) throw ValidationError("manifest row " + std::to_string(line_no) + ": no leaf labels");
    if (dup) out.warnings.push_back("manifest row " + std::to_string(line_no) + ": duplicate leaf label removed");
    ManifestRow row;
    row.image = std::filesystem::path(path).is_absolute() ? std::filesystem::path(path) : base_dir / path;
    if (check_files && !std::filesystem::is_regular_file(row.image))
      throw IoError("unreadable image " + row.image.string());
    row.labels = ancestor_closure(names, h);
    row.leaves = std::move(names);
    out.rows.push_back(std::move(row));
  }
  return out;
}

inline Manifest load_manifest(const std::filesystem::path& path, const LabelHierarchy& h, bool check_files = true) {
  return parse_manifest(read_file(path), h, path.parent_path(), check_files);
}

inline Dataset load_manifest_dataset(const std::filesystem::path& path, const LabelHierarchy& h, std::size_t channels,
                                     std::size_t size, std::vector<std::string>* warnings = nullptr) {
  auto m = load_manifest(path, h);
  if (warnings) *warnings = m.warnings;
  Dataset ds{h, std::vector<Sample>(m.rows.size())};
  parallel_for(m.rows.size(), [&](std::size_t i) {
    ds.samples[i] = Sample{load_image(m.rows[i].image, channels, size), m.rows[i].labels};
  });
  return ds;
}

/// Write every sample as images/NNNNNN.tensor plus manifest.csv under `dir`.
inline void dump_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::ostringstream csv;
  csv << "image_path,leaf_labels\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "images/%06zu.tensor", i);
    save_tensor_image(dir / name, ds.samples[i].image);
    csv << name << ',';
    bool first = true;
    for (auto l : ds.hierarchy.leaves())
      if (ds.samples[i].labels[l]) {
        csv << (first ? "" : ";") << ds.hierarchy.name(l);
        first = false;
      }
    csv << '\n';
  }
  write_file_atomic(dir / "manifest.csv", csv.str());
}

}  // namespace helm
