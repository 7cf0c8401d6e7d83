#include "diffcrn/denoiser.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

using namespace diffcrn;
using M = Mat<double>;

namespace {

M randn(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  Engine rng(seed);
  return gaussian<double>(r, c, rng);
}

/// softmax(q k^T * scale) v with explicit loops, rows are tokens.
M naive_attention(const M& q, const M& k, const M& v, double scale) {
  const Eigen::Index n = q.rows();
  M out = M::Zero(n, v.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    std::vector<double> s(n);
    double mx = -1e300;
    for (Eigen::Index j = 0; j < n; ++j) {
      double dot = 0;
      for (Eigen::Index c = 0; c < q.cols(); ++c) dot += q(i, c) * k(j, c);
      s[j] = dot * scale;
      mx = std::max(mx, s[j]);
    }
    double z = 0;
    for (double& e : s) z += (e = std::exp(e - mx));
    for (Eigen::Index j = 0; j < n; ++j) {
      for (Eigen::Index c = 0; c < v.cols(); ++c) out(i, c) += s[j] / z * v(j, c);
    }
  }
  return out;
}

/// Group channel attention oracle: transpose each group so channels are tokens.
M naive_group_attention(const M& q, const M& k, const M& v, int tokens, int groups) {
  const int c = static_cast<int>(q.cols());
  const int cg = c / groups;
  M out(q.rows(), c);
  for (Eigen::Index b = 0; b < q.rows() / tokens; ++b) {
    for (int i = 0; i < groups; ++i) {
      const M qt = q.block(b * tokens, i * cg, tokens, cg).transpose();
      const M kt = k.block(b * tokens, i * cg, tokens, cg).transpose();
      const M vt = v.block(b * tokens, i * cg, tokens, cg).transpose();
      out.block(b * tokens, i * cg, tokens, cg) = naive_attention(qt, kt, vt, 1.0 / std::sqrt(cg)).transpose();
    }
  }
  return out;
}

AttentionParams<double> attention_params(int width, std::uint64_t seed) {
  Engine rng(seed);
  return AttentionParams<double>("attn", width, rng);
}

M run_ssa(const M& x, const Geometry& geo, AttentionParams<double>& p, std::vector<M>* maps = nullptr) {
  Graph<double> g(false);
  return g.value(ssa(g, g.constant(x), geo, p, maps));
}

M run_sgsa(const M& x, const Geometry& geo, AttentionParams<double>& p, int groups, std::vector<M>* maps = nullptr) {
  Graph<double> g(false);
  return g.value(sgsa(g, g.constant(x), geo, p, groups, maps));
}

}  // namespace

TEST(TimeEmbedding, ZeroTimestep) {
  const M e = time_embedding<double>({0}, 8);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(e(0, i), 1.0);
  for (int i = 4; i < 8; ++i) EXPECT_EQ(e(0, i), 0.0);
}

TEST(TimeEmbedding, UnitTimestepTwoDims) {
  const M e = time_embedding<double>({1}, 2);
  EXPECT_NEAR(e(0, 0), 0.5403, 1e-4);
  EXPECT_NEAR(e(0, 1), 0.8415, 1e-4);
  EXPECT_EQ(e(0, 0), std::cos(1.0));
}

TEST(TimeEmbedding, FrequenciesAndBounds) {
  const M e = time_embedding<double>({3, 1000000}, 6);
  EXPECT_NEAR(e(0, 1), std::cos(3.0 / std::pow(10000.0, 2.0 / 6)), 1e-15);
  EXPECT_NEAR(e(0, 5), std::sin(3.0 / std::pow(10000.0, 4.0 / 6)), 1e-15);
  EXPECT_LE(e.cwiseAbs().maxCoeff(), 1.0);
  EXPECT_THROW(time_embedding<double>({1}, 5), Error);
}

TEST(ConditionScaleShift, IdentityAndPureScale) {
  const Geometry geo{2, 2, 2};
  const M a = randn(8, 3, 1);
  Graph<double> g(false);
  const M zero = M::Zero(2, 6);
  EXPECT_EQ(g.value(condition_scale_shift(g, g.constant(a), geo, g.constant(zero))), a);
  M scale = M::Zero(2, 6);
  scale.leftCols(3).setOnes();
  const M doubled = 2.0 * a;
  EXPECT_EQ(g.value(condition_scale_shift(g, g.constant(a), geo, g.constant(scale))), doubled);
}

TEST(ConditionScaleShift, MatchesElementwiseOracle) {
  const Geometry geo{3, 2, 1};
  const M a = randn(6, 4, 2);
  const M mlp = randn(3, 8, 3);
  Graph<double> g(false);
  const M out = g.value(condition_scale_shift(g, g.constant(a), geo, g.constant(mlp)));
  for (int r = 0; r < 6; ++r) {
    const int b = r / 2;
    for (int c = 0; c < 4; ++c) EXPECT_NEAR(out(r, c), a(r, c) * (1 + mlp(b, c)) + mlp(b, 4 + c), 1e-15);
  }
  EXPECT_THROW(condition_scale_shift(g, g.constant(a), geo, g.constant(randn(3, 6, 1))), Error);
}

TEST(Ssa, SingleTokenReturnsValue) {
  auto p = attention_params(4, 5);
  const M x = randn(1, 4, 6);
  const M v = x * p.wv.value;
  EXPECT_LT((run_ssa(x, Geometry{1, 1, 1}, p) - v).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Ssa, IdenticalTokensGiveIdenticalRows) {
  auto p = attention_params(3, 7);
  M x(2, 3);
  x.row(0) << 0.3, -1.2, 0.7;
  x.row(1) = x.row(0);
  const M y = run_ssa(x, Geometry{1, 1, 2}, p);
  EXPECT_EQ(y.row(0), y.row(1));
}

TEST(Ssa, HandSetTwoChannelPatchMatchesOracle) {
  AttentionParams<double> p;
  p.wq = Parameter<double>("wq", (M(2, 2) << 1.0, 0.5, -0.5, 1.0).finished());
  p.wk = Parameter<double>("wk", (M(2, 2) << 0.2, 0.0, 1.0, -1.0).finished());
  p.wv = Parameter<double>("wv", (M(2, 2) << 1.0, 2.0, 3.0, 4.0).finished());
  const M x = (M(4, 2) << 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, -1.0, 0.5).finished();
  const M expected = naive_attention(x * p.wq.value, x * p.wk.value, x * p.wv.value, 1.0 / std::sqrt(2.0));
  EXPECT_LT((run_ssa(x, Geometry{1, 2, 2}, p) - expected).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Ssa, RandomBatchMatchesOracleAndRowsSumToOne) {
  const int width = 5;
  auto p = attention_params(width, 8);
  for (int P : {1, 2, 3}) {
    const Geometry geo{3, P, P};
    const M x = randn(geo.rows(), width, 9 + P);
    std::vector<M> maps;
    const M y = run_ssa(x, geo, p, &maps);
    ASSERT_EQ(maps.size(), 3u);
    const int n = geo.tokens();
    for (int b = 0; b < 3; ++b) {
      const M xb = x.middleRows(b * n, n);
      const M ref = naive_attention(xb * p.wq.value, xb * p.wk.value, xb * p.wv.value, 1.0 / std::sqrt(width));
      EXPECT_LT((y.middleRows(b * n, n) - ref).cwiseAbs().maxCoeff(), 1e-6);
      for (Eigen::Index r = 0; r < maps[b].rows(); ++r) EXPECT_NEAR(maps[b].row(r).sum(), 1.0, 1e-6);
    }
  }
}

TEST(Ssa, PermutationEquivariantOverTokens) {
  auto p = attention_params(4, 10);
  const Geometry geo{1, 3, 3};
  const M x = randn(9, 4, 11);
  const M y = run_ssa(x, geo, p);
  Engine rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<int> perm(9);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    M xp(9, 4);
    for (int i = 0; i < 9; ++i) xp.row(i) = x.row(perm[i]);
    const M yp = run_ssa(xp, geo, p);
    for (int i = 0; i < 9; ++i) EXPECT_LT((yp.row(i) - y.row(perm[i])).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Sgsa, SingletonGroupsReturnValues) {
  const int width = 4;
  auto p = attention_params(width, 13);
  const Geometry geo{2, 2, 2};
  const M x = randn(geo.rows(), width, 14);
  const M v = x * p.wv.value;
  EXPECT_LT((run_sgsa(x, geo, p, width) - v).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Sgsa, MatchesGroupedOracle) {
  const int width = 6;
  auto p = attention_params(width, 15);
  for (int groups : {1, 2, 3, 6}) {
    for (int P : {1, 2, 3}) {
      const Geometry geo{2, P, P};
      const M x = randn(geo.rows(), width, 16 + P);
      std::vector<M> maps;
      const M y = run_sgsa(x, geo, p, groups, &maps);
      const M ref = naive_group_attention(x * p.wq.value, x * p.wk.value, x * p.wv.value, geo.tokens(), groups);
      EXPECT_LT((y - ref).cwiseAbs().maxCoeff(), 1e-6) << "groups=" << groups << " P=" << P;
      for (const M& a : maps) {
        for (Eigen::Index r = 0; r < a.rows(); ++r) EXPECT_NEAR(a.row(r).sum(), 1.0, 1e-6);
      }
    }
  }
}

TEST(Sgsa, GroupsAreIndependent) {
  // With block-diagonal projections, swapping the two groups' input channels
  // and swapping the outputs back leaves the result unchanged.
  const int width = 4;
  AttentionParams<double> p = attention_params(width, 17);
  for (Parameter<double>* w : {&p.wq, &p.wk, &p.wv}) {
    w->value.block(0, 2, 2, 2).setZero();
    w->value.block(2, 0, 2, 2).setZero();
    w->value.block(2, 2, 2, 2) = w->value.block(0, 0, 2, 2);
  }
  const Geometry geo{1, 3, 3};
  const M x = randn(9, width, 18);
  M xs(9, width);
  xs << x.rightCols(2), x.leftCols(2);
  const M y = run_sgsa(x, geo, p, 2);
  const M ys = run_sgsa(xs, geo, p, 2);
  M back(9, width);
  back << ys.rightCols(2), ys.leftCols(2);
  EXPECT_LT((back - y).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(run_sgsa(x, geo, p, 3), Error);
}

namespace {

DenoiseBlockParams<double> block_params(bool depthwise, int width, int time_dim, double ls, std::uint64_t seed) {
  Engine rng(seed);
  return DenoiseBlockParams<double>("blk", depthwise, width, time_dim, ls, rng);
}

M run_block(bool ssad, const M& x, const Geometry& geo, const std::vector<int>& ts, DenoiseBlockParams<double>& p,
            int time_dim, int groups = 1) {
  Graph<double> g(false);
  Var t = g.constant(time_embedding<double>(ts, time_dim));
  Var y = ssad ? ssad_block(g, g.constant(x), geo, t, p) : sgsad_block(g, g.constant(x), geo, t, p, groups);
  return g.value(y);
}

/// Step-by-step reference for one instance: conv -> LN -> modulate -> attention -> scale -> add.
M block_oracle(bool ssad, const M& x, int P, int t, DenoiseBlockParams<double>& p, int time_dim, int groups) {
  const int width = static_cast<int>(x.cols());
  const int n = P * P;
  M h = M::Zero(n, width);
  if (ssad) {
    for (int i = 0; i < P; ++i)
      for (int j = 0; j < P; ++j)
        for (int c = 0; c < width; ++c) {
          double acc = p.conv_bias.value(0, c);
          for (int di = -1; di <= 1; ++di)
            for (int dj = -1; dj <= 1; ++dj) {
              const int r = i + di, q = j + dj;
              if (r < 0 || r >= P || q < 0 || q >= P) continue;
              acc += p.conv_weight.value((di + 1) * 3 + (dj + 1), c) * x(r * P + q, c);
            }
          h(i * P + j, c) = acc;
        }
  } else {
    h = (x * p.conv_weight.value).rowwise() + p.conv_bias.value.row(0);
  }
  for (int r = 0; r < n; ++r) {
    const double mean = h.row(r).mean();
    const double var = (h.row(r).array() - mean).square().mean();
    for (int c = 0; c < width; ++c) {
      h(r, c) = (h(r, c) - mean) / std::sqrt(var + 1e-5) * p.norm.gain.value(0, c) + p.norm.bias.value(0, c);
    }
  }
  M e = time_embedding<double>({t}, time_dim);
  for (int i = 0; i < time_dim; ++i) e(0, i) = e(0, i) / (1.0 + std::exp(-e(0, i)));
  const M mlp = e * p.time_mlp.weight.value + p.time_mlp.bias.value;
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < width; ++c) h(r, c) = h(r, c) * (1.0 + mlp(0, c)) + mlp(0, width + c);
  const M q = h * p.attn.wq.value, k = h * p.attn.wk.value, v = h * p.attn.wv.value;
  const M a = ssad ? naive_attention(q, k, v, 1.0 / std::sqrt(width)) : naive_group_attention(q, k, v, n, groups);
  M y = x;
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < width; ++c) y(r, c) += p.layer_scale.value(0, c) * a(r, c);
  return y;
}

}  // namespace

TEST(DenoiseBlocks, ZeroLayerScaleIsIdentity) {
  const Geometry geo{2, 3, 3};
  const M x = randn(geo.rows(), 8, 19);
  for (bool ssad : {true, false}) {
    auto p = block_params(ssad, 8, 6, 0.0, 20);
    EXPECT_EQ(run_block(ssad, x, geo, {3, 7}, p, 6, 2), x);
  }
}

TEST(DenoiseBlocks, ZeroInputAndZeroShiftGiveZero) {
  const Geometry geo{2, 2, 2};
  const M x = M::Zero(geo.rows(), 4);
  for (bool ssad : {true, false}) {
    auto p = block_params(ssad, 4, 6, 0.5, 21);
    p.time_mlp.weight.value.rightCols(4).setZero();  // kappa half
    EXPECT_EQ(run_block(ssad, x, geo, {1, 9}, p, 6, 2), x);
  }
}

TEST(DenoiseBlocks, SsadMatchesComposedOracle) {
  for (int width : {1, 2, 3}) {
    auto p = block_params(true, width, 4, 0.7, 22);
    p.conv_bias.value.setConstant(0.1);
    p.norm.gain.value.setConstant(1.3);
    p.norm.bias.value.setConstant(-0.2);
    const Geometry geo{2, 2, 2};
    const M x = randn(geo.rows(), width, 23);
    const M y = run_block(true, x, geo, {2, 5}, p, 4);
    EXPECT_LT((y.topRows(4) - block_oracle(true, x.topRows(4), 2, 2, p, 4, 1)).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((y.bottomRows(4) - block_oracle(true, x.bottomRows(4), 2, 5, p, 4, 1)).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(DenoiseBlocks, SgsadMatchesComposedOracle) {
  for (int groups : {1, 2}) {
    auto p = block_params(false, 4, 4, 0.9, 24);
    const Geometry geo{1, 3, 3};
    const M x = randn(geo.rows(), 4, 25);
    const M y = run_block(false, x, geo, {4}, p, 4, groups);
    EXPECT_LT((y - block_oracle(false, x, 3, 4, p, 4, groups)).cwiseAbs().maxCoeff(), 1e-10);
  }
}

namespace {

DenoiserConfig small_config() { return DenoiserConfig{3, 8, 2, 6, 0.3}; }

}  // namespace

TEST(Denoiser, ShapesAndStages) {
  Denoiser<double> net(small_config(), 1);
  const Geometry geo{2, 3, 3};
  const M x = randn(geo.rows(), 3, 26);
  Graph<double> g(false);
  auto out = net.forward(g, g.constant(x), geo, {1, 4});
  EXPECT_EQ(g.value(out.eps_hat).rows(), x.rows());
  EXPECT_EQ(g.value(out.eps_hat).cols(), x.cols());
  for (Var s : out.stages) {
    ASSERT_TRUE(s.valid());
    EXPECT_EQ(g.value(s).rows(), geo.rows());
    EXPECT_EQ(g.value(s).cols(), 8);
  }
  EXPECT_EQ(kStageNames.size(), 5u);
  EXPECT_THROW(net.predict(randn(geo.rows(), 4, 1), geo, {1, 4}), Error);
  EXPECT_THROW(net.predict(x, geo, {1}), Error);
}

TEST(Denoiser, DeterministicForward) {
  Denoiser<double> a(small_config(), 7);
  Denoiser<double> b(small_config(), 7);
  const Geometry geo{2, 3, 3};
  const M x = randn(geo.rows(), 3, 27);
  EXPECT_EQ(a.predict(x, geo, {2, 3}), a.predict(x, geo, {2, 3}));
  EXPECT_EQ(a.predict(x, geo, {2, 3}), b.predict(x, geo, {2, 3}));
}

TEST(Denoiser, TimestepChangesOutput) {
  Denoiser<double> net(small_config(), 8);
  const Geometry geo{1, 3, 3};
  const M x = randn(geo.rows(), 3, 28);
  EXPECT_GT((net.predict(x, geo, {1}) - net.predict(x, geo, {50})).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Denoiser, ParameterNamesAreUnique) {
  Denoiser<double> net(DenoiserConfig{}, 1);
  std::vector<std::string> names;
  for (auto* p : net.parameters()) names.push_back(p->name);
  std::sort(names.begin(), names.end());
  EXPECT_EQ(std::adjacent_find(names.begin(), names.end()), names.end());
  EXPECT_THROW(Denoiser<double>(DenoiserConfig{3, 10, 4, 6, 0.1}, 1), Error);
}

TEST(ContrastiveEncoder, EmbeddingHas256Dims) {
  ContrastiveEncoder<double> enc(3, 2);
  for (int P : {1, 3, 5}) {
    const Geometry geo{2, P, P};
    const M z = enc.encode(randn(geo.rows(), 3, 29), geo);
    EXPECT_EQ(z.rows(), 2);
    EXPECT_EQ(z.cols(), 256);
  }
  std::vector<std::string> names;
  for (auto* p : enc.parameters()) names.push_back(p->name);
  EXPECT_EQ(std::count_if(names.begin(), names.end(), [](const std::string& n) { return n.find(".norm.") == std::string::npos && n.find("weight") != std::string::npos; }), 7);
  EXPECT_EQ(kEncoderWidths, (std::array<int, 6>{96, 96, 128, 128, 256, 256}));
}

TEST(ContrastiveEncoder, ZeroInputGivesZeroEmbedding) {
  ContrastiveEncoder<double> enc(4, 3);
  const Geometry geo{1, 3, 3};
  EXPECT_EQ(enc.encode(M::Zero(9, 4), geo), M::Zero(1, 256));
}
