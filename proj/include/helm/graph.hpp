#pragma once

#include <string>
#include <vector>

#include "helm/classification.hpp"
#include "helm/hierarchy.hpp"

namespace helm {

struct GraphBranchConfig {
  std::size_t layers = 2;
  std::size_t hidden_dim = 8;
  bool reverse_edges = true;
  bool self_loops = true;

  void validate() const {
    if (layers < 1) throw ValidationError("graph branch needs at least one layer");
    if (hidden_dim < 1) throw ValidationError("graph hidden_dim must be positive");
  }
};

/// Row-normalised in-neighbour matrix A with A[v][u] = 1/deg_in(v) for every
/// edge u -> v. A node without in-edges gets an all-zero row.
template <typename T>
Tensor<T> neighbor_mean_matrix(const EdgeList& edges, std::size_t m) {
  std::vector<std::size_t> deg(m, 0);
  for (auto [s, t] : edges.edges) {
    if (s >= m || t >= m) throw ValidationError("edge id out of range for " + std::to_string(m) + " nodes");
    ++deg[t];
  }
  Tensor<T> a({m, m});
  for (auto [s, t] : edges.edges) a[t * m + s] += T(1) / static_cast<T>(deg[t]);
  return a;
}

/// One mean-aggregator GraphSAGE layer on [M, f] or [B, M, f] node features:
/// act(h W_self + mean_neigh(h) W_neigh + b).
template <typename T>
Var<T> sage_layer(const Var<T>& nodes, const Tensor<T>& adjacency, const ParameterStore<T>& params,
                  const std::string& name, bool activate) {
  using namespace ops;
  auto& tape = nodes.tape();
  const auto& s = nodes.shape();
  if (s.size() < 2 || s[s.size() - 2] != adjacency.size(0))
    throw ValidationError("node features " + to_string(s) + " do not match adjacency " + to_string(adjacency.shape()));
  auto agg = matmul(tape.constant(adjacency), nodes);
  auto out = add(add(matmul(nodes, params.on(tape, name + ".w_self")), matmul(agg, params.on(tape, name + ".w_neigh"))),
                 params.on(tape, name + ".bias"));
  return activate ? relu(out) : out;
}

template <typename T>
void init_graph(ParameterStore<T>& params, std::size_t d, std::size_t m, const GraphBranchConfig& cfg, Rng& rng) {
  cfg.validate();
  std::size_t in = d;
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    const auto name = "graph.sage" + std::to_string(i);
    params.add(name + ".w_self", trunc_normal<T>({in, cfg.hidden_dim}, 0.02, rng));
    params.add(name + ".w_neigh", trunc_normal<T>({in, cfg.hidden_dim}, 0.02, rng));
    params.add(name + ".bias", Tensor<T>({cfg.hidden_dim}));
    in = cfg.hidden_dim;
  }
  params.add("graph.head.weight", trunc_normal<T>({cfg.hidden_dim, m}, 0.02, rng));
  params.add("graph.head.bias", Tensor<T>({m}));
}

/// Graph logits p_g: z_cls [B, M, d] -> node embeddings -> mean over nodes -> [B, M].
template <typename T>
Var<T> graph_forward(const Var<T>& z_cls, const Tensor<T>& adjacency, const GraphBranchConfig& cfg,
                     const ParameterStore<T>& params) {
  auto x = z_cls;
  for (std::size_t i = 0; i < cfg.layers; ++i)
    x = sage_layer(x, adjacency, params, "graph.sage" + std::to_string(i), i + 1 < cfg.layers);
  return linear(ops::mean(x, -2), params, std::string("graph.head"));
}

template <typename T>
Var<T> graph_loss(const Var<T>& p_g, const BatchLabels<T>& labels) {
  return bce_loss(p_g, labels);
}

}  // namespace helm
