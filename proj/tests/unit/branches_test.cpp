#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "helm/augment.hpp"
#include "helm/classification.hpp"
#include "helm/graph.hpp"
#include "helm/numerics/gradcheck.hpp"
#include "helm/ssl.hpp"

namespace helm {
namespace {

BatchLabels<double> labels_of(std::vector<std::vector<double>> rows, std::vector<bool> mask) {
  const std::size_t m = rows[0].size();
  BatchLabels<double> out{Tensor<double>({rows.size(), m}), std::move(mask)};
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < m; ++j) out.targets[i * m + j] = rows[i][j];
  return out;
}

// ---------------------------------------------------------------------------
// classification

TEST(Classify, AffineExamples) {
  ParameterStore<double> p;
  p.add("cls_head.weight", Tensor<double>({1, 1}, {2.0}));
  p.add("cls_head.bias", Tensor<double>({1}, {1.0}));
  Tape<double> tape;
  EXPECT_EQ(classify(tape.constant(Tensor<double>({1, 1}, {3.0})), p).value().item(), 7.0);

  ParameterStore<double> q;
  Rng rng(1);
  init_classifier(q, 768, 30, rng);
  Tape<double> t2;
  auto z = classify(t2.constant(Tensor<double>({16, 768})), q);
  EXPECT_EQ(z.shape(), (Shape{16, 30}));
  for (auto v : z.value().data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(classify(t2.constant(Tensor<double>({1, 3})), ParameterStore<double>()), ValidationError);
}

TEST(BceLoss, HandValues) {
  Tape<double> tape;
  auto l = bce_loss(tape.constant(Tensor<double>({1, 1}, {0.0})), labels_of({{1}}, {true}));
  EXPECT_NEAR(l.value().item(), std::log(2.0), 1e-15);
  auto sat = bce_loss(tape.constant(Tensor<double>({2, 3}, {20, -20, 20, -20, -20, 20})),
                      labels_of({{1, 0, 1}, {0, 0, 1}}, {true, true}));
  EXPECT_LT(sat.value().item(), 1e-8);
  EXPECT_GE(sat.value().item(), 0.0);
  EXPECT_THROW(bce_loss(tape.constant(Tensor<double>({1, 1})), labels_of({{1}}, {false})), ValidationError);
}

TEST(BceLoss, MaskingIsExact) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 1 + rng.below(6);
    Tensor<double> z({4, m});
    for (auto& v : z.storage()) v = 3 * rng.normal();
    std::vector<std::vector<double>> rows(4, std::vector<double>(m));
    for (std::size_t i = 0; i < 2; ++i)
      for (auto& v : rows[i]) v = static_cast<double>(rng.bernoulli(0.5));
    Tape<double> tape;
    const auto full = bce_loss(tape.constant(z), labels_of(rows, {true, true, false, false})).value().item();
    Tensor<double> sub({2, m});
    std::copy_n(z.storage().begin(), 2 * m, sub.storage().begin());
    const auto part = bce_loss(tape.constant(sub), labels_of({rows[0], rows[1]}, {true, true})).value().item();
    EXPECT_EQ(full, part);
  }
}

TEST(BceLoss, GradientMatchesClosedForm) {
  Rng rng(3);
  const std::size_t b = 5, m = 4;
  Tensor<double> z({b, m});
  for (auto& v : z.storage()) v = 2 * rng.normal();
  std::vector<std::vector<double>> rows(b, std::vector<double>(m));
  for (auto& r : rows)
    for (auto& v : r) v = static_cast<double>(rng.bernoulli(0.4));
  const std::vector<bool> mask{true, false, true, true, false};
  ParameterStore<double> p;
  p.add("z", z);
  Tape<double> tape;
  const auto labels = labels_of(rows, mask);
  auto g = tape.backward(bce_loss(p.on(tape, "z"), labels)).at("z");
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const double expect =
          mask[i] ? (1 / (1 + std::exp(-z[i * m + j])) - rows[i][j]) / (3.0 * static_cast<double>(m)) : 0.0;
      EXPECT_NEAR(g[i * m + j], expect, 1e-12);
    }
}

// ---------------------------------------------------------------------------
// graph

ParameterStore<double> identity_sage(std::size_t f) {
  ParameterStore<double> p;
  Tensor<double> eye({f, f});
  for (std::size_t i = 0; i < f; ++i) eye[i * f + i] = 1;
  p.add("l.w_self", eye);
  p.add("l.w_neigh", eye);
  p.add("l.bias", Tensor<double>({f}));
  return p;
}

TEST(SageLayer, ChainExample) {
  const auto h = parse_hierarchy("a:\n  - b:\n      - c\n");
  const auto a = neighbor_mean_matrix<double>(build_edges(h, true, false), 3);
  Tape<double> tape;
  auto out = sage_layer(tape.constant(Tensor<double>({3, 1}, {1, 2, 3})), a, identity_sage(1), "l", false);
  EXPECT_EQ(out.value(), Tensor<double>({3, 1}, {3, 4, 5}));
}

TEST(SageLayer, EmptyAndSelfLoopNeighbourhoods) {
  const auto h = parse_hierarchy("Root: [x, y, z]\n");
  Tensor<double> feats({3, 2}, {1, -2, 3, 4, -5, 6});
  auto p = identity_sage(2);
  for (auto& v : p.get("l.w_neigh").storage()) v = 7.5;
  Tape<double> tape;
  auto none = sage_layer(tape.constant(feats), neighbor_mean_matrix<double>(build_edges(h, true, false), 3), p, "l", true);
  EXPECT_EQ(none.value(), Tensor<double>({3, 2}, {1, 0, 3, 4, 0, 6}));
  auto loops = neighbor_mean_matrix<double>(build_edges(h, false, true), 3);
  Tape<double> t2;
  EXPECT_EQ(ops::matmul(t2.constant(loops), t2.constant(feats)).value(), feats);
}

TEST(GraphForward, ShapesZerosAndDeterminism) {
  const auto h = parse_hierarchy("Root:\n  - p: [a, b]\n  - q\n");
  GraphBranchConfig cfg;
  cfg.hidden_dim = 3;
  ParameterStore<double> p;
  Rng rng(4);
  init_graph(p, 5, h.size(), cfg, rng);
  const auto adj = neighbor_mean_matrix<double>(build_edges(h, true, true), h.size());
  Tensor<double> z({4, h.size(), 5});
  for (auto& v : z.storage()) v = rng.normal();
  std::copy_n(z.storage().begin(), h.size() * 5, z.storage().begin() + static_cast<long>(h.size() * 5));
  Tape<double> tape;
  auto logits = graph_forward(tape.constant(z), adj, cfg, p);
  ASSERT_EQ(logits.shape(), (Shape{4, h.size()}));
  for (std::size_t j = 0; j < h.size(); ++j) EXPECT_EQ(logits.value()[j], logits.value()[h.size() + j]);

  const auto single = parse_hierarchy("water");
  ParameterStore<double> zp;
  init_graph(zp, 2, 1, cfg, rng);
  for (auto& [n, t] : zp)
    for (auto& v : t.storage()) v = 0;
  Tape<double> t2;
  auto zl = graph_forward(t2.constant(Tensor<double>({1, 1, 2}, {1, 2})), neighbor_mean_matrix<double>(build_edges(single, true, true), 1), cfg, zp);
  EXPECT_EQ(zl.value().item(), 0.0);
}

TEST(GraphLoss, SharesBceContract) {
  Tape<double> tape;
  EXPECT_NEAR(graph_loss(tape.constant(Tensor<double>({1, 1})), labels_of({{1}}, {true})).value().item(), std::log(2.0),
              1e-15);
  Rng rng(5);
  Tensor<double> z({3, 4});
  for (auto& v : z.storage()) v = rng.normal();
  const auto lab = labels_of({{1, 0, 1, 0}, {0, 0, 0, 0}, {1, 1, 0, 0}}, {true, false, true});
  EXPECT_EQ(graph_loss(tape.constant(z), lab).value().item(), bce_loss(tape.constant(z), lab).value().item());
}

TEST(GraphLoss, UnlabeledRowsGetActivationsButNoLoss) {
  const auto h = parse_hierarchy("Root:\n  - p: [a, b]\n");
  GraphBranchConfig cfg;
  cfg.hidden_dim = 4;
  ParameterStore<double> p;
  Rng rng(6);
  init_graph(p, 3, h.size(), cfg, rng);
  const auto adj = neighbor_mean_matrix<double>(build_edges(h, true, true), h.size());
  Tensor<double> z({4, 3, 3});
  for (auto& v : z.storage()) v = rng.normal();
  auto lab = labels_of({{1, 1, 0}, {1, 0, 1}, {0, 0, 0}, {0, 0, 0}}, {true, true, false, false});
  Tape<double> tape;
  auto logits = graph_forward(tape.constant(z), adj, cfg, p);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NE(logits.value()[3 * 3 + j], 0.0);
  const double before = graph_loss(logits, lab).value().item();
  Tensor<double> z2 = z;
  for (std::size_t i = 18; i < z2.numel(); ++i) z2[i] += 5;
  Tape<double> t2;
  EXPECT_EQ(graph_loss(graph_forward(t2.constant(z2), adj, cfg, p), lab).value().item(), before);
}

TEST(GraphLoss, RelabelingEquivariance) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    // random forest over n nodes in BFS order
    const std::size_t n = 2 + rng.below(6);
    std::vector<int> parent(n, -1);
    for (std::size_t i = 1; i < n; ++i) parent[i] = rng.bernoulli(0.3) ? -1 : static_cast<int>(rng.below(i));
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    rng.shuffle(perm.begin(), perm.end());
    EdgeList e, pe;
    for (std::size_t i = 0; i < n; ++i)
      if (parent[i] >= 0) {
        const auto s = static_cast<std::size_t>(parent[i]);
        for (auto [a, b] : {std::pair{s, i}, std::pair{i, s}}) {
          e.edges.emplace_back(a, b);
          pe.edges.emplace_back(perm[a], perm[b]);
        }
      }
    for (std::size_t i = 0; i < n; ++i) {
      e.edges.emplace_back(i, i);
      pe.edges.emplace_back(perm[i], perm[i]);
    }
    GraphBranchConfig cfg;
    cfg.hidden_dim = 3;
    ParameterStore<double> p;
    init_graph(p, 2, n, cfg, rng);
    // the head maps to per-node outputs; permute its columns consistently
    ParameterStore<double> pp;
    for (const auto& [name, t] : p) pp.add(name, t);
    auto& hw = pp.get("graph.head.weight");
    auto& hb = pp.get("graph.head.bias");
    const auto& ow = p.get("graph.head.weight");
    const auto& ob = p.get("graph.head.bias");
    for (std::size_t j = 0; j < n; ++j) {
      hb[perm[j]] = ob[j];
      for (std::size_t r = 0; r < 3; ++r) hw[r * n + perm[j]] = ow[r * n + j];
    }
    Tensor<double> z({2, n, 2}), pz({2, n, 2});
    for (auto& v : z.storage()) v = rng.normal();
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t f = 0; f < 2; ++f) pz.at({b, perm[i], f}) = z.at({b, i, f});
    std::vector<std::vector<double>> rows(2, std::vector<double>(n)), prows = rows;
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = 0; i < n; ++i) prows[b][perm[i]] = rows[b][i] = static_cast<double>(rng.bernoulli(0.5));
    Tape<double> tape;
    const double l1 = graph_loss(graph_forward(tape.constant(z), neighbor_mean_matrix<double>(e, n), cfg, p),
                                 labels_of(rows, {true, true})).value().item();
    Tape<double> tape2;  // parameters are keyed by name per tape
    const double l2 = graph_loss(graph_forward(tape2.constant(pz), neighbor_mean_matrix<double>(pe, n), cfg, pp),
                                 labels_of(prows, {true, true})).value().item();
    EXPECT_NEAR(l1, l2, 1e-12);
  }
}

TEST(GraphForward, GradcheckReachesNodeFeatures) {
  const auto h = parse_hierarchy("Root:\n  - p: [a, b]\n");
  GraphBranchConfig cfg;
  cfg.hidden_dim = 3;
  ParameterStore<double> p;
  Rng rng(8);
  init_graph(p, 4, 3, cfg, rng);
  for (auto& [n, t] : p)
    for (auto& v : t.storage()) v += 0.5 * rng.normal();
  Tensor<double> z({2, 3, 4});
  for (auto& v : z.storage()) v = rng.normal();
  p.add("z", z);
  const auto adj = neighbor_mean_matrix<double>(build_edges(h, true, true), 3);
  const auto lab = labels_of({{1, 1, 0}, {0, 0, 0}}, {true, false});
  auto f = [&](Tape<double>& t, const ParameterStore<double>& ps) {
    return graph_loss(graph_forward(ps.on(t, "z"), adj, cfg, ps), lab);
  };
  EXPECT_LT(gradcheck<double>(f, p, 1e-6), 1e-6);
}

// ---------------------------------------------------------------------------
// ssl

TEST(ByolLoss, CosineExamples) {
  Tape<double> t;
  auto c = [&](std::vector<double> a, std::vector<double> b) {
    const std::size_t n = a.size() / 2;
    return byol_loss(t.constant(Tensor<double>({2, n}, a)), t.constant(Tensor<double>({2, n}, b))).value().item();
  };
  EXPECT_NEAR(c({1, 2, -3, 4}, {1, 2, -3, 4}), 0.0, 1e-12);
  EXPECT_NEAR(c({1, 0, 0, 2}, {0, 3, 5, 0}), 2.0, 1e-12);
  EXPECT_NEAR(c({1, 2, -3, 4}, {-2, -4, 6, -8}), 4.0, 1e-12);
  EXPECT_THROW(c({0, 0, 1, 1}, {1, 1, 1, 1}), NumericError);
  EXPECT_THROW(c({1, 1, 1, 1}, {1, 1, 0, 0}), NumericError);
}

TEST(ByolLoss, RangeShuffleAndStopGradient) {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t b = 1 + rng.below(6), n = 1 + rng.below(5);
    Tensor<double> a({b, n}), z({b, n});
    for (auto& v : a.storage()) v = rng.normal();
    for (auto& v : z.storage()) v = rng.normal();
    ParameterStore<double> p;
    p.add("a", a);
    p.add("z", z);
    Tape<double> tape;
    auto loss = byol_loss(p.on(tape, "a"), p.on(tape, "z"));
    const double v = loss.value().item();
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 4.0);
    const auto g = tape.backward(loss);
    EXPECT_EQ(g.count("z"), 0u);
    std::vector<std::size_t> perm(b);
    for (std::size_t i = 0; i < b; ++i) perm[i] = i;
    rng.shuffle(perm.begin(), perm.end());
    Tape<double> t2;
    auto pa = ops::index_select(t2.constant(a), perm), pz = ops::index_select(t2.constant(z), perm);
    EXPECT_NEAR(byol_loss(pa, pz).value().item(), v, 1e-12);
  }
}

TEST(ByolLoss, Gradcheck) {
  Rng rng(10);
  ParameterStore<double> p;
  Tensor<double> a({3, 4}), z({3, 4});
  for (auto& v : a.storage()) v = rng.normal();
  for (auto& v : z.storage()) v = rng.normal();
  p.add("a", a);
  auto f = [&](Tape<double>& t, const ParameterStore<double>& ps) { return byol_loss(ps.on(t, "a"), t.constant(z)); };
  EXPECT_LT(gradcheck<double>(f, p, 1e-6), 1e-4);
  ParameterStore<float> pf;
  pf.add("a", a.cast<float>());
  const auto zf = z.cast<float>();
  auto ff = [&](Tape<float>& t, const ParameterStore<float>& ps) { return byol_loss(ps.on(t, "a"), t.constant(zf)); };
  EXPECT_LT(gradcheck<float>(ff, pf, 1e-3), 1e-4);
}

TEST(EmaUpdate, Examples) {
  ParameterStore<double> online, target(ParamRole::target);
  online.add("w", Tensor<double>({2}, {1, 1}));
  target.add("w", Tensor<double>({2}, {0, 0}));
  ema_update(online, target, 0.996);
  EXPECT_NEAR(target.get("w")[0], 0.004, 1e-15);
  auto before = target.get("w");
  ema_update(online, target, 1.0);
  EXPECT_EQ(target.get("w"), before);
  ema_update(online, target, 0.0);
  EXPECT_EQ(target.get("w"), online.get("w"));
  EXPECT_THROW(ema_update(online, target, 1.5), ValidationError);
  target.add("extra", Tensor<double>({1}));
  EXPECT_THROW(ema_update(online, target, 0.5), ValidationError);
}

TEST(EmaUpdate, GeometricDecay) {
  Rng rng(11);
  ParameterStore<double> online, target(ParamRole::target);
  Tensor<double> th({6}), xi({6});
  for (auto& v : th.storage()) v = rng.normal();
  for (auto& v : xi.storage()) v = rng.normal();
  online.add("w", th);
  target.add("w", xi);
  const double tau = 0.9;
  for (int k = 1; k <= 10; ++k) {
    ema_update(online, target, tau);
    for (std::size_t i = 0; i < 6; ++i)
      EXPECT_NEAR(std::abs(target.get("w")[i] - th[i]), std::pow(tau, k) * std::abs(xi[i] - th[i]), 1e-12);
  }
}

TEST(ByolHeads, TargetMirrorsProjector) {
  ParameterStore<double> p;
  Rng rng(12);
  ByolHeadsConfig cfg;
  init_byol_heads(p, 8, cfg, rng);
  const auto target = p.subset({"projector."}, ParamRole::target);
  EXPECT_EQ(target.size(), p.subset({"projector."}, ParamRole::online).size());
  for (const auto& [name, t] : target) {
    EXPECT_FALSE(name.starts_with("predictor"));
    EXPECT_EQ(t.shape(), p.get(name).shape());
  }
  EXPECT_EQ(p.get("projector.fc2.weight").shape(), (Shape{cfg.hidden, cfg.out}));
  EXPECT_EQ(p.get("predictor.fc1.weight").shape(), (Shape{cfg.out, cfg.hidden}));
}

// ---------------------------------------------------------------------------
// augmentation

Tensor<float> test_image(Rng& rng) {
  Tensor<float> img({3, 12, 12});
  for (auto& v : img.storage()) v = static_cast<float>(rng.uniform());
  return img;
}

TEST(Augment, ZeroProbabilityIsIdentity) {
  Rng rng(13);
  const auto img = test_image(rng);
  EXPECT_EQ(augment(img, AugmentationPolicy::none(), 5), img);
}

TEST(Augment, DoubleFlipIsIdentity) {
  Rng rng(14);
  const auto img = test_image(rng);
  AugmentationPolicy p;
  p.hflip_p = 1;
  const auto once = augment(img, p, 1);
  EXPECT_NE(once, img);
  EXPECT_EQ(augment(once, p, 2), img);
  p.hflip_p = 0;
  p.vflip_p = 1;
  EXPECT_EQ(augment(augment(img, p, 3), p, 4), img);
}

TEST(Augment, DeterministicShapeAndRange) {
  Rng rng(15);
  const auto img = test_image(rng);
  const auto strong = AugmentationPolicy::strong();
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto a = augment(img, strong, seed);
    EXPECT_EQ(a, augment(img, strong, seed));
    EXPECT_EQ(a.shape(), img.shape());
    for (auto v : a.data()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
  EXPECT_NE(augment(img, strong, 1), augment(img, strong, 2));
}

TEST(Augment, DegenerateParameters) {
  Rng rng(16);
  const auto img = test_image(rng);
  auto p = AugmentationPolicy::strong();
  p.crop_scale_min = 0;
  EXPECT_THROW(augment(img, p, 1), ValidationError);
  p = AugmentationPolicy::strong();
  p.crop_scale_min = 0.9;
  p.crop_scale_max = 0.5;
  EXPECT_THROW(augment(img, p, 1), ValidationError);
  p = AugmentationPolicy::weak();
  p.hflip_p = 1.5;
  EXPECT_THROW(augment(img, p, 1), ValidationError);
  EXPECT_THROW(augment(Tensor<float>({12, 12}), AugmentationPolicy::weak(), 1), ValidationError);
}

}  // namespace
}  // namespace helm
