#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "helm/numerics/checkpoint.hpp"
#include "helm/numerics/gradcheck.hpp"
#include "helm/numerics/ops.hpp"
#include "helm/numerics/optim.hpp"

namespace helm {
namespace {

using namespace helm::ops;

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.storage()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

TEST(Backward, SumOfSquares) {
  Tape<float> tape;
  auto w = tape.parameter("w", Tensor<float>({3}, {1, 2, 3}));
  auto g = tape.backward(sum(w * w));
  ASSERT_EQ(g.size(), 1u);
  EXPECT_EQ(g.at("w").storage(), (std::vector<float>{2, 4, 6}));
}

TEST(Backward, ConstantLossHasNoGradients) {
  Tape<float> tape;
  auto c = tape.constant(Tensor<float>({2}, {1, 2}));
  EXPECT_TRUE(tape.backward(sum(c)).empty());
}

TEST(Backward, FrozenParameterGetsNothing) {
  Tape<double> tape;
  auto w = tape.parameter("w", Tensor<double>({2}, {1, 2}));
  auto xi = tape.parameter("xi", Tensor<double>({2}, {3, 4}), false);
  auto g = tape.backward(sum(w * xi));
  EXPECT_EQ(g.count("xi"), 0u);
  EXPECT_EQ(g.at("w").storage(), (std::vector<double>{3, 4}));
}

TEST(Backward, Errors) {
  Tape<float> tape;
  auto w = tape.parameter("w", Tensor<float>({2}, {1, 2}));
  EXPECT_THROW(tape.backward(w * w), ValidationError);
  auto loss = sum(w);
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), ValidationError);
}

TEST(Backward, ReusedParameterAccumulates) {
  Tape<double> tape;
  auto w = tape.parameter("w", Tensor<double>::scalar(2.0));
  auto again = tape.parameter("w", Tensor<double>::scalar(2.0));
  EXPECT_EQ(w.id(), again.id());
  auto g = tape.backward(add(mul(w, w), scale(again, 3.0)));
  EXPECT_DOUBLE_EQ(g.at("w").item(), 7.0);
}

TEST(Backward, ConflictingParameterValues) {
  Tape<double> tape;
  tape.parameter("w", Tensor<double>::scalar(2.0));
  EXPECT_THROW(tape.parameter("w", Tensor<double>::scalar(3.0)), ValidationError);
}

TEST(Gradcheck, Square) {
  std::function<Var<double>(Tape<double>&, const Var<double>&)> f = [](Tape<double>&, const Var<double>& x) {
    return sum(x * x);
  };
  EXPECT_LT(gradcheck<double>(f, Tensor<double>::scalar(3.0), 1e-4), 1e-6);
}

TEST(Gradcheck, RejectsNonScalar) {
  std::function<Var<double>(Tape<double>&, const Var<double>&)> f = [](Tape<double>&, const Var<double>& x) {
    return x * x;
  };
  EXPECT_THROW(gradcheck<double>(f, Tensor<double>({2}, {1, 2}), 1e-4), ValidationError);
  std::function<Var<double>(Tape<double>&, const Var<double>&)> g = [](Tape<double>&, const Var<double>& x) {
    return sum(log(x));
  };
  EXPECT_THROW(gradcheck<double>(g, Tensor<double>({1}, {-1.0}), 1e-4), NumericError);
}

TEST(Gradcheck, TwoLayerMlpFloat) {
  Rng rng(3);
  ParameterStore<float> p;
  p.add("w1", random_tensor<float>({4, 6}, rng, -0.5, 0.5));
  p.add("b1", random_tensor<float>({6}, rng, -0.1, 0.1));
  p.add("w2", random_tensor<float>({6, 2}, rng, -0.5, 0.5));
  p.add("b2", random_tensor<float>({2}, rng, -0.1, 0.1));
  const auto x = random_tensor<float>({5, 4}, rng);
  std::function<Var<float>(Tape<float>&, const ParameterStore<float>&)> f = [&](Tape<float>& t,
                                                                                const ParameterStore<float>& s) {
    auto h = gelu(add(matmul(t.constant(x), s.on(t, "w1")), s.on(t, "b1")));
    auto y = add(matmul(h, s.on(t, "w2")), s.on(t, "b2"));
    return mean(y * y);
  };
  EXPECT_LT(gradcheck<float>(f, p, 1e-3), 1e-4);
}

// --- property tests: every primitive against central differences ---------

template <typename T>
struct PrimitiveCase {
  const char* name;
  std::function<Var<T>(Tape<T>&, const Var<T>&)> op;  // output of any shape
  Shape shape;
  double lo = -1.0, hi = 1.0;
};

template <typename T>
std::vector<PrimitiveCase<T>> primitive_cases(Rng& rng) {
  const auto rs = [&](std::size_t lo, std::size_t hi) { return static_cast<std::size_t>(rng.between(lo, hi)); };
  const std::size_t a = rs(1, 4), b = rs(2, 5), c = rs(1, 4);
  auto other = [&rng](Shape s) { return random_tensor<T>(std::move(s), rng); };
  const auto mb = other({b, c});
  const auto bias = other({b});
  const auto gam = other({b});
  const auto div_by = random_tensor<T>({a, b}, rng, 0.5, 2.0);
  const auto batch_rhs = other({2, b, c});
  const auto batch_lhs = other({3, a, b});
  const auto lead = other({a, 1});
  return {
      {"add", [=](Tape<T>& t, const Var<T>& x) { return add(x, t.constant(bias)); }, {a, b}},
      {"sub", [=](Tape<T>& t, const Var<T>& x) { return sub(t.constant(bias), x); }, {a, b}},
      {"mul", [=](Tape<T>& t, const Var<T>& x) { return mul(x, t.constant(bias)); }, {a, b}},
      {"mul_self", [=](Tape<T>&, const Var<T>& x) { return mul(x, x); }, {a, b}},
      {"div_num", [=](Tape<T>& t, const Var<T>& x) { return div(x, t.constant(div_by)); }, {a, b}},
      {"div_den", [=](Tape<T>& t, const Var<T>& x) { return div(t.constant(div_by), x); }, {a, b}, 0.5, 2.0},
      {"exp", [](Tape<T>&, const Var<T>& x) { return exp(x); }, {a, b}},
      {"log", [](Tape<T>&, const Var<T>& x) { return log(x); }, {a, b}, 0.5, 2.0},
      {"sqrt", [](Tape<T>&, const Var<T>& x) { return sqrt(x); }, {a, b}, 0.5, 2.0},
      {"sigmoid", [](Tape<T>&, const Var<T>& x) { return sigmoid(x); }, {a, b}},
      {"gelu", [](Tape<T>&, const Var<T>& x) { return gelu(x); }, {a, b}},
      {"softplus", [](Tape<T>&, const Var<T>& x) { return softplus(x); }, {a, b}, -3.0, 3.0},
      {"relu", [](Tape<T>&, const Var<T>& x) { return relu(x); }, {a, b}, 0.1, 1.0},
      {"sum_axis", [](Tape<T>&, const Var<T>& x) { return sum(x, 1); }, {a, b, c}},
      {"mean_axis", [](Tape<T>&, const Var<T>& x) { return mean(x, 0); }, {a, b, c}},
      {"mean", [](Tape<T>&, const Var<T>& x) { return mean(x); }, {a, b}},
      {"matmul_lhs", [=](Tape<T>& t, const Var<T>& x) { return matmul(x, t.constant(mb)); }, {a, b}},
      {"matmul_rhs", [=](Tape<T>& t, const Var<T>& x) { return matmul(t.constant(mb), x, true, false); }, {b, a}},
      {"matmul_tb", [=](Tape<T>& t, const Var<T>& x) { return matmul(x, t.constant(mb), false, true); }, {a, c}},
      {"matmul_batched", [=](Tape<T>& t, const Var<T>& x) { return matmul(x, t.constant(batch_rhs)); }, {2, a, b}},
      {"matmul_bcast", [=](Tape<T>& t, const Var<T>& x) { return matmul(t.constant(batch_lhs), x); }, {b, c}},
      {"matmul_self_t", [](Tape<T>&, const Var<T>& x) { return matmul(x, x, false, true); }, {2, a, b}},
      {"softmax", [](Tape<T>&, const Var<T>& x) { return softmax(x); }, {a, b}},
      {"layer_norm_x", [=](Tape<T>& t, const Var<T>& x) { return layer_norm(x, t.constant(gam), t.constant(bias)); },
       {a, b}},
      {"layer_norm_gamma",
       [=](Tape<T>& t, const Var<T>& x) { return layer_norm(t.constant(div_by), x, t.constant(bias)); },
       {b}},
      {"concat", [=](Tape<T>& t, const Var<T>& x) { return concat<T>({t.constant(lead), x, x}, 1); }, {a, b}},
      {"slice", [](Tape<T>&, const Var<T>& x) { return slice(x, 1, 1, 1); }, {a, b, c}},
      {"permute", [](Tape<T>&, const Var<T>& x) { return permute(x, {2, 0, 1}); }, {a, b, c}},
      {"transpose", [](Tape<T>&, const Var<T>& x) { return transpose(x); }, {a, b}},
      {"reshape", [=](Tape<T>&, const Var<T>& x) { return reshape(x, {b, a}); }, {a, b}},
      {"expand", [=](Tape<T>&, const Var<T>& x) { return expand(x, {3, a, b}); }, {a, 1}},
      {"index_select", [](Tape<T>&, const Var<T>& x) { return index_select(x, {1, 0, 1}); }, {2, 3}},
  };
}

template <typename T>
double worst_primitive_error(Rng& rng, double eps, std::string& worst_case) {
  double worst = 0.0;
  for (const auto& pc : primitive_cases<T>(rng)) {
    Tape<T> scratch;
    const auto point = random_tensor<T>(pc.shape, rng, pc.lo, pc.hi);
    const auto out_shape = pc.op(scratch, scratch.constant(point)).shape();
    const auto weights = random_tensor<T>(out_shape, rng);
    std::function<Var<T>(Tape<T>&, const Var<T>&)> f = [&](Tape<T>& t, const Var<T>& x) {
      return sum(mul(pc.op(t, x), t.constant(weights)));
    };
    const double e = gradcheck<T>(f, point, eps);
    if (e > worst) {
      worst = e;
      worst_case = pc.name;
    }
  }
  return worst;
}

TEST(PrimitiveGradients, Double) {
  Rng rng(101);
  for (int round = 0; round < 10; ++round) {
    std::string which;
    EXPECT_LT(worst_primitive_error<double>(rng, 1e-5, which), 1e-7) << which;
  }
}

TEST(PrimitiveGradients, Float) {
  Rng rng(202);
  for (int round = 0; round < 10; ++round) {
    std::string which;
    EXPECT_LT(worst_primitive_error<float>(rng, 3e-3, which), 1e-4) << which;
  }
}

TEST(Broadcast, BiasAndColumn) {
  Tape<float> t;
  auto x = t.constant(Tensor<float>({2, 3}, {1, 2, 3, 4, 5, 6}));
  auto row = add(x, t.constant(Tensor<float>({3}, {10, 20, 30})));
  EXPECT_EQ(row.value().storage(), (std::vector<float>{11, 22, 33, 14, 25, 36}));
  auto col = mul(x, t.constant(Tensor<float>({2, 1}, {1, -1})));
  EXPECT_EQ(col.value().storage(), (std::vector<float>{1, 2, 3, -4, -5, -6}));
  EXPECT_THROW(add(x, t.constant(Tensor<float>({2}))), ValidationError);
}

TEST(Softmax, SingletonIsOne) {
  Tape<float> t;
  auto s = softmax(t.constant(Tensor<float>({1, 1}, {42.0f})));
  EXPECT_EQ(s.value()[0], 1.0f);
}

TEST(AdamW, FirstStepFromZero) {
  ParameterStore<double> p;
  p.add("p", Tensor<double>::scalar(0.0));
  AdamW<double> opt({0.9, 0.999, 1e-8, 0.0});
  opt.step(p, {{"p", Tensor<double>::scalar(1.0)}}, 1, 1e-4);
  EXPECT_NEAR(p.get("p").item(), -1e-4, 1e-12);
}

TEST(AdamW, ZeroGradientNoDecayIsNoop) {
  ParameterStore<double> p;
  p.add("p", Tensor<double>({3}, {1, -2, 3}));
  AdamW<double> opt({0.9, 0.999, 1e-8, 0.0});
  opt.step(p, {{"p", Tensor<double>({3})}}, 1, 1e-3);
  EXPECT_EQ(p.get("p").storage(), (std::vector<double>{1, -2, 3}));
}

TEST(AdamW, DecoupledDecay) {
  ParameterStore<double> p;
  p.add("p", Tensor<double>({2}, {2.0, -4.0}));
  AdamW<double> opt({0.9, 0.999, 1e-8, 0.1});
  opt.step(p, {{"p", Tensor<double>({2})}}, 1, 0.01);
  EXPECT_DOUBLE_EQ(p.get("p")[0], 2.0 * (1 - 0.01 * 0.1));
  EXPECT_DOUBLE_EQ(p.get("p")[1], -4.0 * (1 - 0.01 * 0.1));
}

TEST(AdamW, Deterministic) {
  Rng rng(5);
  ParameterStore<float> a, b;
  const auto init = random_tensor<float>({8}, rng);
  a.add("w", init);
  b.add("w", init);
  AdamW<float> oa, ob;
  for (long t = 1; t <= 5; ++t) {
    const auto g = random_tensor<float>({8}, rng);
    oa.step(a, {{"w", g}}, t, 1e-3);
    ob.step(b, {{"w", g}}, t, 1e-3);
  }
  EXPECT_EQ(a.get("w"), b.get("w"));
}

TEST(AdamW, Errors) {
  ParameterStore<float> p;
  p.add("w", Tensor<float>({2}));
  AdamW<float> opt;
  EXPECT_THROW(opt.step(p, {{"w", Tensor<float>({3})}}, 1, 1e-3), ValidationError);
  EXPECT_THROW(opt.step(p, {{"w", Tensor<float>({2})}}, 0, 1e-3), ValidationError);
}

TEST(CosineLr, Endpoints) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 100, 1e-3), 1e-3);
  EXPECT_NEAR(cosine_lr(100, 100, 1e-3), 0.0, 1e-18);
  EXPECT_NEAR(cosine_lr(50, 100, 1e-3), 5e-4, 1e-15);
  EXPECT_THROW(cosine_lr(0, 0, 1e-3), ValidationError);
  double prev = cosine_lr(0, 37, 1.0);
  for (long t = 1; t <= 37; ++t) {
    const double cur = cosine_lr(t, 37, 1.0);
    EXPECT_LE(cur, prev);
    prev = cur;
  }
}

TEST(Checkpoint, EncodeDecode) {
  Rng rng(9);
  ParameterStore<float> p;
  p.add("a.weight", random_tensor<float>({3, 4}, rng));
  p.add("b", random_tensor<float>({5}, rng));
  Checkpoint ck;
  ck.put_store(p);
  ck.put("extra", random_tensor<double>({2}, rng));
  ck.metadata["note"] = "x";
  const auto back = decode_checkpoint(encode_checkpoint(ck));
  ParameterStore<float> q;
  q.add("a.weight", Tensor<float>({3, 4}));
  q.add("b", Tensor<float>({5}));
  back.load_store(q);
  EXPECT_EQ(q.get("a.weight"), p.get("a.weight"));
  EXPECT_EQ(q.get("b"), p.get("b"));
  EXPECT_EQ(back.get<double>("extra"), ck.get<double>("extra"));
  EXPECT_EQ(back.metadata["note"], "x");
  ParameterStore<float> wrong;
  wrong.add("b", Tensor<float>({4}));
  EXPECT_THROW(back.load_store(wrong), ValidationError);
  EXPECT_THROW(decode_checkpoint("abc"), ValidationError);
}

}  // namespace
}  // namespace helm
