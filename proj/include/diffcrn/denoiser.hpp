#pragma once

// Staged noise-prediction network (embed -> 2x SSAD -> bridge -> 2x SGSAD ->
// head) and the contrastive encoder applied to clean and reconstructed views.

#include "diffcrn/layers.hpp"

#include <array>
#include <cmath>
#include <string>
#include <vector>

namespace diffcrn {

struct DenoiserConfig {
  int bands = 16;            // C, input/output channels
  int width = 64;            // stage width D
  int groups = 4;            // spectral groups N_g of the SGSAD blocks
  int time_dim = 64;         // sinusoidal embedding size d
  double layer_scale_init = 1e-4;
};

inline constexpr std::array<const char*, 5> kStageNames = {"stage1", "stage2", "stage3", "stage4", "final"};

/// Sinusoidal timestep embedding, cosine half first:
///   [cos(t / 10000^(2i/d)), sin(t / 10000^(2i/d))], i = 0..d/2-1.
template <typename S>
Mat<S> time_embedding(const std::vector<int>& ts, int d) {
  require(d > 0 && d % 2 == 0, "time_embedding: dimension must be even, got " + std::to_string(d));
  const int half = d / 2;
  Mat<S> out(static_cast<Eigen::Index>(ts.size()), d);
  for (std::size_t b = 0; b < ts.size(); ++b) {
    for (int i = 0; i < half; ++i) {
      const double arg = static_cast<double>(ts[b]) / std::pow(10000.0, 2.0 * i / d);
      out(b, i) = static_cast<S>(std::cos(arg));
      out(b, half + i) = static_cast<S>(std::sin(arg));
    }
  }
  return out;
}

/// a * (1 + gamma) + kappa with (gamma, kappa) the two channel halves of the
/// time-MLP output, broadcast over each instance's positions.
template <typename S>
Var condition_scale_shift(Graph<S>& g, Var a, const Geometry& geo, Var mlp_out) {
  const Eigen::Index w = g.value(a).cols();
  require(g.value(mlp_out).cols() == 2 * w,
          "condition_scale_shift: time-MLP width must be twice the activation width");
  require(g.value(mlp_out).rows() == geo.batch, "condition_scale_shift: one conditioning row per instance");
  Var gamma = ops::slice_cols(g, mlp_out, 0, w);
  Var kappa = ops::slice_cols(g, mlp_out, w, w);
  Var scaled = ops::instance_mul(g, a, geo, ops::add_scalar(g, gamma, S(1)));
  return ops::instance_add(g, scaled, geo, kappa);
}

/// Bias-free query/key/value projections.
template <typename S>
struct AttentionParams {
  Parameter<S> wq, wk, wv;

  AttentionParams() = default;
  AttentionParams(const std::string& name, int width, Engine& rng)
      : wq(normal_param<S>(name + ".wq", width, width, 1.0 / std::sqrt(width), rng)),
        wk(normal_param<S>(name + ".wk", width, width, 1.0 / std::sqrt(width), rng)),
        wv(normal_param<S>(name + ".wv", width, width, 1.0 / std::sqrt(width), rng)) {}

  void collect(ParamList<S>& out) { out.insert(out.end(), {&wq, &wk, &wv}); }
};

/// Spatial self-attention: softmax(Q K^T / sqrt(width)) V over the P^2 tokens.
template <typename S>
Var ssa(Graph<S>& g, Var x, const Geometry& geo, AttentionParams<S>& p, std::vector<Mat<S>>* maps = nullptr) {
  require(g.value(x).cols() == p.wq.value.rows(), "ssa: input width does not match projections");
  Var q = ops::matmul(g, x, g.param(p.wq));
  Var k = ops::matmul(g, x, g.param(p.wk));
  Var v = ops::matmul(g, x, g.param(p.wv));
  return ops::spatial_attention(g, q, k, v, geo, maps);
}

/// Spectral group self-attention: channels split into `groups` groups, each
/// channel a token of dimension P^2, scores scaled by 1/sqrt(C_g).
template <typename S>
Var sgsa(Graph<S>& g, Var x, const Geometry& geo, AttentionParams<S>& p, int groups,
         std::vector<Mat<S>>* maps = nullptr) {
  require(g.value(x).cols() == p.wq.value.rows(), "sgsa: input width does not match projections");
  Var q = ops::matmul(g, x, g.param(p.wq));
  Var k = ops::matmul(g, x, g.param(p.wk));
  Var v = ops::matmul(g, x, g.param(p.wv));
  return ops::group_channel_attention(g, q, k, v, geo, groups, maps);
}

/// Parameters shared by both attention-denoising block kinds; `conv` is a
/// depthwise 3x3 kernel for SSAD and a pointwise 1x1 conv for SGSAD.
template <typename S>
struct DenoiseBlockParams {
  Parameter<S> conv_weight;
  Parameter<S> conv_bias;
  NormParams<S> norm;
  LinearParams<S> time_mlp;  // SiLU(embedding) -> (gamma, kappa)
  AttentionParams<S> attn;
  Parameter<S> layer_scale;

  DenoiseBlockParams() = default;
  DenoiseBlockParams(const std::string& name, bool depthwise, int width, int time_dim, double ls_init, Engine& rng)
      : conv_weight(depthwise ? normal_param<S>(name + ".dwconv.weight", 9, width, std::sqrt(2.0 / 9.0), rng)
                              : normal_param<S>(name + ".pwconv.weight", width, width, std::sqrt(2.0 / width), rng)),
        conv_bias(const_param<S>(name + (depthwise ? ".dwconv.bias" : ".pwconv.bias"), 1, width, 0.0)),
        norm(name + ".norm", width),
        time_mlp(name + ".time_mlp", time_dim, 2 * width, rng),
        attn(name + ".attn", width, rng),
        layer_scale(const_param<S>(name + ".layer_scale", 1, width, ls_init)) {}

  void collect(ParamList<S>& out) {
    out.insert(out.end(), {&conv_weight, &conv_bias});
    norm.collect(out);
    time_mlp.collect(out);
    attn.collect(out);
    out.push_back(&layer_scale);
  }
};

/// y = x + LayerScale * SSA(modulate(LN(DWConv(x)), t))
template <typename S>
Var ssad_block(Graph<S>& g, Var x, const Geometry& geo, Var t_emb, DenoiseBlockParams<S>& p) {
  Var h = ops::depthwise_conv2d(g, x, geo, g.param(p.conv_weight), g.param(p.conv_bias), 3);
  h = p.norm.layer_norm(g, h);
  h = condition_scale_shift(g, h, geo, p.time_mlp.apply(g, ops::silu(g, t_emb)));
  h = ssa(g, h, geo, p.attn);
  return ops::add(g, x, ops::mul_row(g, h, g.param(p.layer_scale)));
}

/// y = x + LayerScale * SGSA(modulate(LN(PWConv(x)), t))
template <typename S>
Var sgsad_block(Graph<S>& g, Var x, const Geometry& geo, Var t_emb, DenoiseBlockParams<S>& p, int groups) {
  Var h = ops::linear(g, x, g.param(p.conv_weight), g.param(p.conv_bias));
  h = p.norm.layer_norm(g, h);
  h = condition_scale_shift(g, h, geo, p.time_mlp.apply(g, ops::silu(g, t_emb)));
  h = sgsa(g, h, geo, p.attn, groups);
  return ops::add(g, x, ops::mul_row(g, h, g.param(p.layer_scale)));
}

template <typename S>
struct DenoiserOutputs {
  Var eps_hat;
  std::array<Var, 5> stages;  // ordered as kStageNames
};

template <typename S>
class Denoiser {
 public:
  Denoiser() = default;

  Denoiser(const DenoiserConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    require(cfg.bands >= 1 && cfg.width >= 1, "Denoiser: bands and width must be positive");
    require(cfg.groups >= 1 && cfg.width % cfg.groups == 0, "Denoiser: width must be divisible by the group count");
    require(cfg.time_dim > 0 && cfg.time_dim % 2 == 0, "Denoiser: time embedding size must be even");
    Engine rng = substream(seed, "init.denoiser");
    const int D = cfg.width;
    embed_ = ConvParams<S>("denoiser.embed.conv", cfg.bands, D, 3, rng);
    ssad_[0] = DenoiseBlockParams<S>("denoiser.ssad1", true, D, cfg.time_dim, cfg.layer_scale_init, rng);
    ssad_[1] = DenoiseBlockParams<S>("denoiser.ssad2", true, D, cfg.time_dim, cfg.layer_scale_init, rng);
    bridge_ = ConvParams<S>("denoiser.bridge.conv", D, D, 3, rng);
    sgsad_[0] = DenoiseBlockParams<S>("denoiser.sgsad1", false, D, cfg.time_dim, cfg.layer_scale_init, rng);
    sgsad_[1] = DenoiseBlockParams<S>("denoiser.sgsad2", false, D, cfg.time_dim, cfg.layer_scale_init, rng);
    head_norm_ = NormParams<S>("denoiser.head.norm", D);
    head_ = ConvParams<S>("denoiser.head.conv", D, cfg.bands, 1, rng, 1.0);
  }

  Denoiser(const Denoiser&) = delete;
  Denoiser& operator=(const Denoiser&) = delete;
  Denoiser(Denoiser&&) = default;
  Denoiser& operator=(Denoiser&&) = default;

  const DenoiserConfig& config() const { return cfg_; }

  ParamList<S> parameters() {
    ParamList<S> out;
    embed_.collect(out);
    for (auto& b : ssad_) b.collect(out);
    bridge_.collect(out);
    for (auto& b : sgsad_) b.collect(out);
    head_norm_.collect(out);
    head_.collect(out);
    return out;
  }

  DenoiseBlockParams<S>& ssad(int i) { return ssad_[i]; }
  DenoiseBlockParams<S>& sgsad(int i) { return sgsad_[i]; }

  /// embed -> SSAD1 -> SSAD2 -> bridge -> SGSAD1 -> SGSAD2 -> LN/GELU ("final") -> 1x1 head.
  /// The embed and bridge convs are linear so each token keeps its amplitude.
  DenoiserOutputs<S> forward(Graph<S>& g, Var x_t, const Geometry& geo, const std::vector<int>& ts) {
    require(g.value(x_t).rows() == geo.rows() && g.value(x_t).cols() == cfg_.bands,
            "denoiser_forward: input must be (B*P*P) x C");
    require(static_cast<int>(ts.size()) == geo.batch, "denoiser_forward: one timestep per instance");
    Var t_emb = g.constant(time_embedding<S>(ts, cfg_.time_dim));
    DenoiserOutputs<S> out;
    Var h = embed_.apply(g, x_t, geo);
    h = ssad_block(g, h, geo, t_emb, ssad_[0]);
    out.stages[0] = h;
    h = ssad_block(g, h, geo, t_emb, ssad_[1]);
    out.stages[1] = h;
    h = bridge_.apply(g, h, geo);
    h = sgsad_block(g, h, geo, t_emb, sgsad_[0], cfg_.groups);
    out.stages[2] = h;
    h = sgsad_block(g, h, geo, t_emb, sgsad_[1], cfg_.groups);
    out.stages[3] = h;
    h = ops::gelu(g, head_norm_.layer_norm(g, h));
    out.stages[4] = h;
    out.eps_hat = head_.apply(g, h, geo);
    return out;
  }

  /// Inference-only forward returning eps_hat.
  Mat<S> predict(const Mat<S>& x_t, const Geometry& geo, const std::vector<int>& ts) {
    Graph<S> g(false);
    return g.value(forward(g, g.constant(x_t), geo, ts).eps_hat);
  }

  /// Inference-only forward returning eps_hat and the five stage activations.
  std::pair<Mat<S>, std::array<Mat<S>, 5>> predict_with_features(const Mat<S>& x_t, const Geometry& geo,
                                                                  const std::vector<int>& ts) {
    Graph<S> g(false);
    auto out = forward(g, g.constant(x_t), geo, ts);
    std::array<Mat<S>, 5> feats;
    for (std::size_t s = 0; s < feats.size(); ++s) feats[s] = g.value(out.stages[s]);
    return {g.value(out.eps_hat), std::move(feats)};
  }

 private:
  DenoiserConfig cfg_;
  ConvParams<S> embed_;
  std::array<DenoiseBlockParams<S>, 2> ssad_;
  ConvParams<S> bridge_;
  std::array<DenoiseBlockParams<S>, 2> sgsad_;
  NormParams<S> head_norm_;
  ConvParams<S> head_;
};

inline constexpr std::array<int, 6> kEncoderWidths = {96, 96, 128, 128, 256, 256};
inline constexpr int kEmbeddingDim = 256;

/// Six 3x3 conv -> LN -> GELU layers, spatial average pool, linear to 256.
template <typename S>
class ContrastiveEncoder {
 public:
  ContrastiveEncoder() = default;

  ContrastiveEncoder(int bands, std::uint64_t seed) : bands_(bands) {
    Engine rng = substream(seed, "init.encoder");
    int in = bands;
    for (std::size_t i = 0; i < kEncoderWidths.size(); ++i) {
      const std::string name = "encoder.conv" + std::to_string(i + 1);
      convs_[i] = ConvParams<S>(name, in, kEncoderWidths[i], 3, rng);
      norms_[i] = NormParams<S>(name + ".norm", kEncoderWidths[i]);
      in = kEncoderWidths[i];
    }
    proj_ = LinearParams<S>("encoder.proj", in, kEmbeddingDim, rng);
  }

  ContrastiveEncoder(const ContrastiveEncoder&) = delete;
  ContrastiveEncoder& operator=(const ContrastiveEncoder&) = delete;
  ContrastiveEncoder(ContrastiveEncoder&&) = default;
  ContrastiveEncoder& operator=(ContrastiveEncoder&&) = default;

  ParamList<S> parameters() {
    ParamList<S> out;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      convs_[i].collect(out);
      norms_[i].collect(out);
    }
    proj_.collect(out);
    return out;
  }

  /// (B*P*P) x C patches -> B x 256 embeddings.
  Var forward(Graph<S>& g, Var x, const Geometry& geo) {
    require(g.value(x).rows() == geo.rows() && g.value(x).cols() == bands_,
            "contrastive_encode: input must be (B*P*P) x C");
    Var h = x;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      h = ops::gelu(g, norms_[i].layer_norm(g, convs_[i].apply(g, h, geo)));
    }
    return proj_.apply(g, ops::mean_pool(g, h, geo));
  }

  Mat<S> encode(const Mat<S>& x, const Geometry& geo) {
    Graph<S> g(false);
    return g.value(forward(g, g.constant(x), geo));
  }

 private:
  int bands_ = 0;
  std::array<ConvParams<S>, 6> convs_;
  std::array<NormParams<S>, 6> norms_;
  LinearParams<S> proj_;
};

}  // namespace diffcrn
