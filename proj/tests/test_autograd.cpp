#include "diffcrn/ops.hpp"
#include "diffcrn/optim.hpp"
#include "diffcrn/rng.hpp"

#include <gtest/gtest.h>

using namespace diffcrn;
using M = Mat<double>;

namespace {

M scalar(double v) { return M::Constant(1, 1, v); }

}  // namespace

TEST(Graph, ChainRuleOnScalars) {
  // f(a, b) = sum((a * b) + a), df/da = b + 1, df/db = a
  Parameter<double> a("a", (M(1, 3) << 1, 2, 3).finished());
  Parameter<double> b("b", (M(1, 3) << -1, 0.5, 4).finished());
  Graph<double> g;
  Var av = g.param(a);
  Var f = ops::sum_all(g, ops::add(g, ops::mul(g, av, g.param(b)), av));
  EXPECT_DOUBLE_EQ(g.scalar(f), (-1 + 1 + 12) + (1 + 2 + 3));
  g.backward(f);
  EXPECT_EQ(a.grad, (M(1, 3) << 0, 1.5, 5).finished());
  EXPECT_EQ(b.grad, (M(1, 3) << 1, 2, 3).finished());
}

TEST(Graph, ParameterUsedTwiceAccumulates) {
  Parameter<double> w("w", scalar(3.0));
  Graph<double> g;
  Var x = g.param(w);
  Var y = g.param(w);
  g.backward(ops::mul(g, x, y));  // w^2
  EXPECT_DOUBLE_EQ(w.grad(0, 0), 6.0);
}

TEST(Graph, GradientsAccumulateAcrossBackwardCallsUntilZeroed) {
  Parameter<double> w("w", scalar(2.0));
  for (int k = 0; k < 2; ++k) {
    Graph<double> g;
    g.backward(ops::scale(g, g.param(w), 5.0));
  }
  EXPECT_DOUBLE_EQ(w.grad(0, 0), 10.0);
  w.zero_grad();
  EXPECT_DOUBLE_EQ(w.grad(0, 0), 0.0);
}

TEST(Graph, ConstantsReceiveNoGradient) {
  Parameter<double> w("w", scalar(2.0));
  Graph<double> g;
  Var c = g.constant(scalar(4.0));
  Var y = ops::mul(g, c, g.param(w));
  EXPECT_FALSE(g.needs_grad(c));
  EXPECT_TRUE(g.needs_grad(y));
  g.backward(y);
  EXPECT_DOUBLE_EQ(w.grad(0, 0), 4.0);
  EXPECT_FALSE(g.has_grad(c));
}

TEST(Graph, InferenceGraphRefusesBackward) {
  Parameter<double> w("w", scalar(2.0));
  Graph<double> g(false);
  Var y = ops::scale(g, g.param(w), 3.0);
  EXPECT_FALSE(g.needs_grad(y));
  EXPECT_DOUBLE_EQ(g.scalar(y), 6.0);
  EXPECT_THROW(g.backward(y), Error);
}

TEST(Graph, BackwardNeedsScalar) {
  Parameter<double> w("w", M::Ones(2, 2));
  Graph<double> g;
  EXPECT_THROW(g.backward(g.param(w)), Error);
}

TEST(Adam, FirstStepsMatchHandComputation) {
  Parameter<double> w("w", (M(1, 2) << 1.0, -2.0).finished());
  Adam<double> opt({&w}, 0.1);
  const M g1 = (M(1, 2) << 0.5, -4.0).finished();
  w.grad = g1;
  opt.step();
  // Bias-corrected first step is lr * sign(g) up to eps.
  EXPECT_NEAR(w.value(0, 0), 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-12);
  EXPECT_NEAR(w.value(0, 1), -2.0 + 0.1 * 4.0 / (4.0 + 1e-8), 1e-12);
  const M g2 = (M(1, 2) << 1.0, 0.0).finished();
  w.grad = g2;
  const M before = w.value;
  opt.step();
  for (int i = 0; i < 2; ++i) {
    const double m = (0.9 * 0.1 * g1(0, i) + 0.1 * g2(0, i)) / (1 - 0.81);
    const double v = (0.999 * 0.001 * g1(0, i) * g1(0, i) + 0.001 * g2(0, i) * g2(0, i)) / (1 - 0.999 * 0.999);
    EXPECT_NEAR(w.value(0, i), before(0, i) - 0.1 * m / (std::sqrt(v) + 1e-8), 1e-12);
  }
  EXPECT_EQ(opt.steps(), 2);
}

TEST(Adam, MinimisesQuadratic) {
  Parameter<double> w("w", (M(1, 3) << 5, -3, 0.5).finished());
  Adam<double> opt({&w}, 0.05);
  for (int k = 0; k < 2000; ++k) {
    opt.zero_grad();
    Graph<double> g;
    g.backward(ops::sum_squares(g, g.param(w)));
    opt.step();
  }
  EXPECT_LT(w.value.cwiseAbs().maxCoeff(), 1e-2);
}

TEST(Checksum, SensitiveToValuesAndNames) {
  Parameter<float> a("a", Mat<float>::Ones(2, 2));
  Parameter<float> b("b", Mat<float>::Ones(2, 2));
  const auto h = checksum<float>({&a});
  EXPECT_EQ(h, checksum<float>({&a}));
  EXPECT_NE(h, checksum<float>({&b}));
  a.value(1, 1) = std::nextafter(1.0f, 2.0f);
  EXPECT_NE(h, checksum<float>({&a}));
}

TEST(Substream, IndependentAndReproducible) {
  Engine a = substream(7, "synth.noise");
  Engine b = substream(7, "synth.noise");
  Engine c = substream(7, "synth.layout");
  Engine d = substream(8, "synth.noise");
  Engine e = substream(7, "synth.noise", 1);
  const auto x = a();
  EXPECT_EQ(x, b());
  EXPECT_NE(x, c());
  EXPECT_NE(x, d());
  EXPECT_NE(x, e());
}

TEST(Gaussian, FloatAndDoubleShareTheSequence) {
  Engine r1(3), r2(3);
  const Mat<float> f = gaussian<float>(4, 5, r1);
  const M d = gaussian<double>(4, 5, r2);
  EXPECT_EQ(f, d.cast<float>());
  Engine r3(4);
  const M big = gaussian<double>(200, 500, r3);
  EXPECT_NEAR(big.mean(), 0.0, 0.01);
  EXPECT_NEAR((big.array() - big.mean()).square().mean(), 1.0, 0.01);
}
