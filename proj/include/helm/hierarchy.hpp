#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "helm/errors.hpp"

namespace helm {

/// Label taxonomy as a forest. Ids are breadth-first in document order, so
/// each level occupies a contiguous id range.
class LabelHierarchy {
 public:
  LabelHierarchy() = default;

  /// Build from names and parent links (-1 for level-1 labels). Names must
  /// already be breadth-first ordered; validated here.
  LabelHierarchy(std::vector<std::string> names, std::vector<int> parent) : names_(std::move(names)), parent_(std::move(parent)) {
    if (names_.empty()) throw ValidationError("empty hierarchy");
    if (parent_.size() != names_.size()) throw ValidationError("parent list size mismatch");
    const auto m = names_.size();
    level_.assign(m, 0);
    std::vector<int> child_count(m, 0);
    for (std::size_t i = 0; i < m; ++i) {
      if (!index_.emplace(names_[i], i).second) throw ValidationError("duplicate label name: " + names_[i]);
      const int p = parent_[i];
      if (p < 0) {
        level_[i] = 1;
      } else {
        if (static_cast<std::size_t>(p) >= i) throw ValidationError("labels are not in breadth-first order");
        level_[i] = level_[static_cast<std::size_t>(p)] + 1;
        ++child_count[static_cast<std::size_t>(p)];
      }
      if (i > 0 && level_[i] < level_[i - 1]) throw ValidationError("labels are not in breadth-first order");
    }
    const int depth = *std::max_element(level_.begin(), level_.end());
    level_sizes_.assign(static_cast<std::size_t>(depth), 0);
    for (std::size_t i = 0; i < m; ++i) {
      ++level_sizes_[static_cast<std::size_t>(level_[i] - 1)];
      if (child_count[i] == 0) leaves_.push_back(i);
    }
  }

  std::size_t size() const { return names_.size(); }
  std::size_t depth() const { return level_sizes_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::string& name(std::size_t id) const { return names_.at(id); }
  std::optional<std::size_t> parent(std::size_t id) const {
    const int p = parent_.at(id);
    return p < 0 ? std::nullopt : std::optional<std::size_t>(static_cast<std::size_t>(p));
  }
  const std::vector<int>& parents() const { return parent_; }
  /// 1-based level.
  int level(std::size_t id) const { return level_.at(id); }
  const std::vector<std::size_t>& level_sizes() const { return level_sizes_; }
  const std::vector<std::size_t>& leaves() const { return leaves_; }
  bool is_leaf(std::size_t id) const { return std::binary_search(leaves_.begin(), leaves_.end(), id); }

  std::optional<std::size_t> find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? std::nullopt : std::optional<std::size_t>(it->second);
  }

  std::size_t id(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("unknown label: " + name);
    return it->second;
  }

  std::vector<std::size_t> children(std::size_t id) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < size(); ++i)
      if (parent_[i] == static_cast<int>(id)) out.push_back(i);
    return out;
  }

  /// Ancestor of `id` at `level` (1-based), or `id` itself if already there.
  std::size_t ancestor_at(std::size_t id, int level) const {
    if (level < 1 || level > level_.at(id)) throw ValidationError("no ancestor at requested level");
    while (level_[id] > level) id = static_cast<std::size_t>(parent_[id]);
    return id;
  }

  /// First id of the given 1-based level.
  std::size_t level_offset(int level) const {
    std::size_t off = 0;
    for (int l = 1; l < level; ++l) off += level_sizes_.at(static_cast<std::size_t>(l - 1));
    return off;
  }

  /// Flat hierarchy of the leaves only, in leaf id order (the MLC baseline).
  LabelHierarchy leaf_only() const {
    std::vector<std::string> names;
    for (auto l : leaves_) names.push_back(names_[l]);
    return LabelHierarchy(std::move(names), std::vector<int>(leaves_.size(), -1));
  }

  friend bool operator==(const LabelHierarchy& a, const LabelHierarchy& b) {
    return a.names_ == b.names_ && a.parent_ == b.parent_;
  }

 private:
  std::vector<std::string> names_;
  std::vector<int> parent_;
  std::vector<int> level_;
  std::vector<std::size_t> level_sizes_;
  std::vector<std::size_t> leaves_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Binary label assignment over all M labels.
struct LabelVector {
  std::vector<std::uint8_t> bits;

  std::size_t size() const { return bits.size(); }
  std::size_t count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }
  bool operator[](std::size_t i) const { return bits[i] != 0; }
  friend bool operator==(const LabelVector&, const LabelVector&) = default;
};

inline bool is_ancestor_closed(const LabelVector& v, const LabelHierarchy& h) {
  if (v.size() != h.size()) return false;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i])
      if (auto p = h.parent(i); p && !v[*p]) return false;
  return true;
}

inline LabelVector ancestor_closure(const std::vector<std::string>& leaf_names, const LabelHierarchy& h) {
  LabelVector out{std::vector<std::uint8_t>(h.size(), 0)};
  for (const auto& name : leaf_names) {
    auto id = h.find(name);
    if (!id) throw ValidationError("unknown label: " + name);
    if (!h.is_leaf(*id)) throw ValidationError("label is not a leaf: " + name);
    std::optional<std::size_t> cur = *id;
    while (cur && !out.bits[*cur]) {
      out.bits[*cur] = 1;
      cur = h.parent(*cur);
    }
  }
  return out;
}

inline LabelVector ancestor_closure_ids(const std::vector<std::size_t>& leaf_ids, const LabelHierarchy& h) {
  std::vector<std::string> names;
  for (auto id : leaf_ids) names.push_back(h.name(id));
  return ancestor_closure(names, h);
}

struct EdgeList {
  std::vector<std::pair<std::size_t, std::size_t>> edges;  // (source, target)
  bool includes_reverse = false;
  bool includes_self_loops = false;
};

/// Parent->child edges, optionally followed by child->parent and self loops.
/// No root node is materialised; the graph has exactly M nodes.
inline EdgeList build_edges(const LabelHierarchy& h, bool add_reverse, bool add_self_loops) {
  EdgeList out;
  out.includes_reverse = add_reverse;
  out.includes_self_loops = add_self_loops;
  for (std::size_t i = 0; i < h.size(); ++i)
    if (auto p = h.parent(i)) out.edges.emplace_back(*p, i);
  if (add_reverse) {
    const auto n = out.edges.size();
    for (std::size_t e = 0; e < n; ++e) out.edges.emplace_back(out.edges[e].second, out.edges[e].first);
  }
  if (add_self_loops)
    for (std::size_t i = 0; i < h.size(); ++i) out.edges.emplace_back(i, i);
  return out;
}

struct LevelStats {
  std::vector<double> cardinality;  // mean active labels per sample, per level
  std::vector<double> density;      // cardinality / level size
};

inline LevelStats level_stats(const std::vector<LabelVector>& dataset, const LabelHierarchy& h) {
  if (dataset.empty()) throw ValidationError("level_stats of an empty dataset");
  LevelStats s;
  s.cardinality.assign(h.depth(), 0.0);
  for (const auto& v : dataset) {
    if (v.size() != h.size()) throw ValidationError("label vector length does not match hierarchy");
    for (std::size_t i = 0; i < v.size(); ++i)
      if (v[i]) s.cardinality[static_cast<std::size_t>(h.level(i) - 1)] += 1.0;
  }
  for (std::size_t l = 0; l < h.depth(); ++l) {
    s.cardinality[l] /= static_cast<double>(dataset.size());
    s.density.push_back(s.cardinality[l] / static_cast<double>(h.level_sizes()[l]));
  }
  return s;
}

// ---------------------------------------------------------------------------
// YAML form.
//
// A label with children is a map key whose value lists the children. A child
// entry is either a scalar (a label, possibly defined elsewhere in the
// document) or a single-key map defining that child's own children inline.
// Definitions may also be flat: top-level keys for labels listed as children
// elsewhere. A single parentless key named "Root" is a wrapper and is dropped.

namespace detail {

struct HierarchyBuilder {
  std::vector<std::string> order;                        // first-appearance order
  std::map<std::string, std::vector<std::string>> kids;  // definitions
  std::map<std::string, std::string> parent_of;

  void note(const std::string& name) {
    if (std::find(order.begin(), order.end(), name) == order.end()) order.push_back(name);
  }

  void define(const std::string& name, const YAML::Node& value) {
    note(name);
    if (kids.count(name)) throw ValidationError("duplicate label name: " + name);
    auto& list = kids[name];
    if (!value || value.IsNull()) return;
    auto add_child = [&](const std::string& child) {
      if (std::find(list.begin(), list.end(), child) != list.end()) throw ValidationError("duplicate label name: " + child);
      if (child == name) throw ValidationError("cycle detected at " + name);
      if (auto it = parent_of.find(child); it != parent_of.end() && it->second != name)
        throw ValidationError("child listed under two parents: " + child);
      parent_of[child] = name;
      list.push_back(child);
      note(child);
    };
    auto entry = [&](const YAML::Node& e) {
      if (e.IsScalar()) {
        add_child(e.as<std::string>());
      } else if (e.IsMap()) {
        for (const auto& kv : e) {
          const auto child = kv.first.as<std::string>();
          add_child(child);
          define(child, kv.second);
        }
      } else {
        throw ValidationError("unsupported hierarchy entry under " + name);
      }
    };
    if (value.IsSequence()) {
      for (const auto& e : value) entry(e);
    } else if (value.IsMap()) {
      entry(value);
    } else if (value.IsScalar()) {
      add_child(value.as<std::string>());
    }
  }
};

inline bool is_root_wrapper(const std::string& s) { return s == "Root" || s == "root" || s == "ROOT"; }

}  // namespace detail

inline LabelHierarchy parse_hierarchy(const std::string& text) {
  YAML::Node doc;
  try {
    doc = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ValidationError(std::string("invalid YAML: ") + e.what());
  }
  if (!doc || doc.IsNull() || (doc.IsMap() && doc.size() == 0)) throw ValidationError("empty document");
  detail::HierarchyBuilder b;
  if (doc.IsMap()) {
    for (const auto& kv : doc) b.define(kv.first.as<std::string>(), kv.second);
  } else if (doc.IsSequence()) {
    for (const auto& e : doc) {
      if (e.IsScalar()) {
        b.define(e.as<std::string>(), YAML::Node());
      } else if (e.IsMap()) {
        for (const auto& kv : e) b.define(kv.first.as<std::string>(), kv.second);
      } else {
        throw ValidationError("unsupported top-level hierarchy entry");
      }
    }
  } else if (doc.IsScalar()) {
    b.define(doc.as<std::string>(), YAML::Node());
  }

  // Cycle check: follow parent links from every label.
  for (const auto& name : b.order) {
    std::set<std::string> seen{name};
    auto cur = name;
    while (b.parent_of.count(cur)) {
      cur = b.parent_of.at(cur);
      if (!seen.insert(cur).second) throw ValidationError("cycle detected at " + cur);
    }
  }

  std::vector<std::string> roots;
  for (const auto& name : b.order)
    if (!b.parent_of.count(name)) roots.push_back(name);
  if (roots.size() == 1 && detail::is_root_wrapper(roots[0]) && !b.kids[roots[0]].empty()) {
    const auto wrapper = roots[0];
    roots = b.kids[wrapper];
    for (const auto& r : roots) b.parent_of.erase(r);
  }
  if (roots.empty()) throw ValidationError("cycle detected: no parentless label");

  // Breadth-first, level by level, children in listed order.
  std::vector<std::string> names;
  std::vector<int> parent;
  std::vector<std::string> frontier = roots;
  std::vector<int> frontier_parent(roots.size(), -1);
  while (!frontier.empty()) {
    std::vector<std::string> next;
    std::vector<int> next_parent;
    for (std::size_t i = 0; i < frontier.size(); ++i) {
      const int id = static_cast<int>(names.size());
      names.push_back(frontier[i]);
      parent.push_back(frontier_parent[i]);
      if (auto it = b.kids.find(frontier[i]); it != b.kids.end())
        for (const auto& c : it->second) {
          next.push_back(c);
          next_parent.push_back(id);
        }
    }
    frontier = std::move(next);
    frontier_parent = std::move(next_parent);
  }
  return LabelHierarchy(std::move(names), std::move(parent));
}

/// Nested YAML under a "Root" key; leaves are scalar list entries.
inline std::string serialize_hierarchy(const LabelHierarchy& h) {
  std::vector<std::vector<std::size_t>> kids(h.size());
  std::vector<std::size_t> roots;
  for (std::size_t i = 0; i < h.size(); ++i) {
    if (auto p = h.parent(i))
      kids[*p].push_back(i);
    else
      roots.push_back(i);
  }
  YAML::Emitter out;
  auto emit_entry = [&](auto&& self, std::size_t id) -> void {
    if (kids[id].empty()) {
      out << h.name(id);
      return;
    }
    out << YAML::BeginMap << YAML::Key << h.name(id) << YAML::Value << YAML::BeginSeq;
    for (auto c : kids[id]) self(self, c);
    out << YAML::EndSeq << YAML::EndMap;
  };
  out << YAML::BeginMap << YAML::Key << "Root" << YAML::Value << YAML::BeginSeq;
  for (auto r : roots) emit_entry(emit_entry, r);
  out << YAML::EndSeq << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

}  // namespace helm
