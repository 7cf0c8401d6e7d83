#pragma once

// Multi-timestep feature fusion classifier on top of a frozen denoiser.

#include "diffcrn/denoiser.hpp"
#include "diffcrn/diffusion.hpp"

#include <array>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace diffcrn {

enum class HeadKind {
  kFull,    // align -> AWAM per stage -> CTSSFM -> GAP -> FC
  kLinear,  // align -> sum over stages and timesteps -> GAP -> FC
  kRaw,     // raw patch -> 1x1 conv -> GAP -> FC (no diffusion features)
};

inline const char* head_name(HeadKind k) {
  switch (k) {
    case HeadKind::kFull: return "full";
    case HeadKind::kLinear: return "linear";
    case HeadKind::kRaw: return "raw";
  }
  return "?";
}

inline HeadKind parse_head(const std::string& s) {
  if (s == "full") return HeadKind::kFull;
  if (s == "linear") return HeadKind::kLinear;
  if (s == "raw") return HeadKind::kRaw;
  throw Error("unknown classifier head '" + s + "' (expected full, linear or raw)");
}

struct ClassifierConfig {
  int stage_width = 64;  // denoiser stage width
  int bands = 16;        // raw input channels, used by the raw head
  int width = 64;        // D_cls
  int reduction = 4;     // AWAM MLP ratio r
  int norm_groups = 8;   // CTSSFM GroupNorm groups
  int classes = 4;
  HeadKind head = HeadKind::kFull;
};

/// Denoiser stage activations for one batch: [timestep][stage].
template <typename S>
using StageFeatureSet = std::vector<std::array<Mat<S>, 5>>;

/// Noises x0 at each timestep ts[j] with eps[j] and records the five stage
/// activations of the frozen denoiser.
template <typename S>
StageFeatureSet<S> extract_stage_features(Denoiser<S>& denoiser, const Mat<S>& x0, const Geometry& geo,
                                          const std::vector<int>& ts, const NoiseSchedule& sched,
                                          const std::vector<Mat<S>>& eps) {
  require(!ts.empty(), "extract_features: no timesteps");
  require(eps.size() == ts.size(), "extract_features: one noise draw per timestep");
  StageFeatureSet<S> out;
  for (std::size_t j = 0; j < ts.size(); ++j) {
    sched.check(ts[j]);
    require_shape(eps[j], x0.rows(), x0.cols(), "extract_features noise");
    const std::vector<int> tv(static_cast<std::size_t>(geo.batch), ts[j]);
    Mat<S> x_t = q_sample_batch<S>(x0, geo, tv, eps[j], sched);
    out.push_back(denoiser.predict_with_features(x_t, geo, tv).second);
  }
  return out;
}

template <typename S>
StageFeatureSet<S> extract_stage_features(Denoiser<S>& denoiser, const Mat<S>& x0, const Geometry& geo,
                                          const std::vector<int>& ts, const NoiseSchedule& sched, Engine& noise_rng) {
  std::vector<Mat<S>> eps;
  for (std::size_t j = 0; j < ts.size(); ++j) eps.push_back(gaussian<S>(x0.rows(), x0.cols(), noise_rng));
  return extract_stage_features(denoiser, x0, geo, ts, sched, eps);
}

template <typename S>
struct AwamParams {
  LinearParams<S> fc1;  // D -> D/r, ReLU
  LinearParams<S> fc2;  // D/r -> D
  ConvParams<S> post;   // 1x1

  AwamParams() = default;
  AwamParams(const std::string& name, int width, int reduction, Engine& rng)
      : fc1(name + ".mlp1", width, width / reduction, rng, 2.0),
        fc2(name + ".mlp2", width / reduction, width, rng),
        post(name + ".conv", width, width, 1, rng, 1.0) {}

  void collect(ParamList<S>& out) {
    fc1.collect(out);
    fc2.collect(out);
    post.collect(out);
  }
};

/// Channel attention map sigmoid(MLP(AvgPool F) + MLP(MaxPool F)), batch x D.
template <typename S>
Var awam_attention(Graph<S>& g, Var f, const Geometry& geo, AwamParams<S>& p) {
  auto mlp = [&](Var v) { return p.fc2.apply(g, ops::relu(g, p.fc1.apply(g, v))); };
  return ops::sigmoid(g, ops::add(g, mlp(ops::mean_pool(g, f, geo)), mlp(ops::max_pool(g, f, geo))));
}

/// F' = (F * M(F)) * Conv1x1(F * M(F))
template <typename S>
Var awam(Graph<S>& g, Var f, const Geometry& geo, AwamParams<S>& p) {
  Var refined = ops::instance_mul(g, f, geo, awam_attention(g, f, geo, p));
  return ops::mul(g, refined, p.post.apply(g, refined, geo));
}

template <typename S>
struct CtssfmParams {
  ConvParams<S> spectral;  // 1x1
  ConvParams<S> spatial;   // 3x3
  NormParams<S> norm;      // GroupNorm

  CtssfmParams() = default;
  CtssfmParams(const std::string& name, int width, Engine& rng)
      : spectral(name + ".spectral", width, width, 1, rng, 1.0),
        spatial(name + ".spatial", width, width, 3, rng),
        norm(name + ".norm", width) {}

  void collect(ParamList<S>& out) {
    spectral.collect(out);
    spatial.collect(out);
    norm.collect(out);
  }
};

/// GELU(GroupNorm(Conv3x3(F + sigmoid(GAP(Conv1x1 F)) * F)))
template <typename S>
Var ctssfm(Graph<S>& g, Var f, const Geometry& geo, CtssfmParams<S>& p, int norm_groups) {
  Var spe = ops::sigmoid(g, ops::mean_pool(g, p.spectral.apply(g, f, geo), geo));
  Var mixed = ops::add(g, f, ops::instance_mul(g, f, geo, spe));
  return ops::gelu(g, p.norm.group_norm(g, p.spatial.apply(g, mixed, geo), geo, norm_groups));
}

/// Mean cross-entropy of logits (batch x N) against class indices.
template <typename S>
Var cross_entropy(Graph<S>& g, Var logits, const std::vector<int>& labels) {
  const Mat<S>& z = g.value(logits);
  require(static_cast<Eigen::Index>(labels.size()) == z.rows(), "ce_loss: one label per row");
  require(z.allFinite(), "ce_loss: non-finite logits");
  Mat<S> prob(z.rows(), z.cols());
  S total = 0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const int y = labels[i];
    require(y >= 0 && y < z.cols(), "ce_loss: label " + std::to_string(y) + " out of range");
    const S mx = z.row(i).maxCoeff();
    prob.row(i) = (z.row(i).array() - mx).exp();
    const S denom = prob.row(i).sum();
    prob.row(i) /= denom;
    total += -(z(i, y) - mx - std::log(denom));
  }
  Mat<S> out(1, 1);
  out(0, 0) = total / static_cast<S>(z.rows());
  return g.record(std::move(out), {logits}, [logits, labels, prob = std::move(prob)](Graph<S>& g, Var self) {
    Mat<S> d = prob;
    for (std::size_t i = 0; i < labels.size(); ++i) d(i, labels[i]) -= S(1);
    g.grad(logits) += d * (g.grad(self)(0, 0) / static_cast<S>(labels.size()));
  });
}

template <typename S>
S ce_loss(const Mat<S>& logits, const std::vector<int>& labels) {
  Graph<S> g(false);
  return g.scalar(cross_entropy(g, g.constant(logits), labels));
}

template <typename S>
class Classifier {
 public:
  Classifier() = default;

  Classifier(const ClassifierConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    require(cfg.classes >= 1, "Classifier: need at least one class");
    require(cfg.reduction >= 1 && cfg.width % cfg.reduction == 0, "Classifier: reduction ratio must divide D_cls");
    require(cfg.norm_groups >= 1 && cfg.width % cfg.norm_groups == 0, "Classifier: GroupNorm groups must divide D_cls");
    Engine rng = substream(seed, "init.classifier");
    if (cfg.head == HeadKind::kRaw) {
      align_.push_back(ConvParams<S>("classifier.align_raw", cfg.bands, cfg.width, 1, rng));
    } else {
      for (std::size_t s = 0; s < kStageNames.size(); ++s) {
        align_.push_back(ConvParams<S>(std::string("classifier.align.") + kStageNames[s], cfg.stage_width, cfg.width, 1, rng));
      }
    }
    if (cfg.head == HeadKind::kFull) {
      for (std::size_t s = 0; s < kStageNames.size(); ++s) {
        awam_.push_back(AwamParams<S>(std::string("classifier.awam.") + kStageNames[s], cfg.width, cfg.reduction, rng));
      }
      ctssfm_ = CtssfmParams<S>("classifier.ctssfm", cfg.width, rng);
    }
    fc_ = LinearParams<S>("classifier.fc", cfg.width, cfg.classes, rng);
  }

  Classifier(const Classifier&) = delete;
  Classifier& operator=(const Classifier&) = delete;
  Classifier(Classifier&&) = default;
  Classifier& operator=(Classifier&&) = default;

  const ClassifierConfig& config() const { return cfg_; }

  ParamList<S> parameters() {
    ParamList<S> out;
    for (auto& a : align_) a.collect(out);
    for (auto& a : awam_) a.collect(out);
    if (cfg_.head == HeadKind::kFull) ctssfm_.collect(out);
    fc_.collect(out);
    return out;
  }

  AwamParams<S>& awam_params(int stage) { return awam_.at(stage); }
  CtssfmParams<S>& ctssfm_params() { return ctssfm_; }

  /// chi = Conv1x1(stage activation) for one (timestep, stage) pair.
  Var align(Graph<S>& g, Var stage_activation, const Geometry& geo, int stage) {
    return align_.at(stage).apply(g, stage_activation, geo);
  }

  /// Aligned features keyed by (timestep, stage), the classifier's input.
  std::map<std::pair<int, int>, Mat<S>> extract_features(const StageFeatureSet<S>& feats, const std::vector<int>& ts,
                                                         const Geometry& geo) {
    require(feats.size() == ts.size(), "extract_features: one feature set per timestep");
    std::map<std::pair<int, int>, Mat<S>> out;
    Graph<S> g(false);
    for (std::size_t j = 0; j < ts.size(); ++j) {
      for (int s = 0; s < 5; ++s) out[{ts[j], s}] = g.value(align(g, g.constant(feats[j][s]), geo, s));
    }
    return out;
  }

  /// Fusion and head over aligned features chi[timestep][stage].
  Var classify(Graph<S>& g, const std::vector<std::array<Var, 5>>& chi, const Geometry& geo) {
    require(cfg_.head != HeadKind::kRaw, "classify: raw head takes patches, not stage features");
    require(!chi.empty(), "classify: no timesteps");
    std::array<Var, 5> per_stage;
    for (int s = 0; s < 5; ++s) {
      Var acc = chi[0][s];
      require(acc.valid(), "classify: missing (timestep, stage) feature");
      for (std::size_t j = 1; j < chi.size(); ++j) {
        require(chi[j][s].valid(), "classify: missing (timestep, stage) feature");
        acc = ops::add(g, acc, chi[j][s]);
      }
      per_stage[s] = cfg_.head == HeadKind::kFull ? awam(g, acc, geo, awam_[s]) : acc;
    }
    Var fused = per_stage[0];
    for (int s = 1; s < 5; ++s) fused = ops::add(g, fused, per_stage[s]);
    if (cfg_.head == HeadKind::kFull) fused = ctssfm(g, fused, geo, ctssfm_, cfg_.norm_groups);
    return fc_.apply(g, ops::mean_pool(g, fused, geo));
  }

  /// Logits from raw stage activations (full/linear heads).
  Var logits(Graph<S>& g, const StageFeatureSet<S>& feats, const Geometry& geo) {
    std::vector<std::array<Var, 5>> chi(feats.size());
    for (std::size_t j = 0; j < feats.size(); ++j) {
      for (int s = 0; s < 5; ++s) chi[j][s] = align(g, g.constant(feats[j][s]), geo, s);
    }
    return classify(g, chi, geo);
  }

  /// Logits of the raw-patch baseline.
  Var raw_logits(Graph<S>& g, const Mat<S>& patches, const Geometry& geo) {
    require(cfg_.head == HeadKind::kRaw, "raw_logits: classifier was not built with the raw head");
    Var h = align_.at(0).apply(g, g.constant(patches), geo);
    return fc_.apply(g, ops::mean_pool(g, h, geo));
  }

 private:
  ClassifierConfig cfg_;
  std::vector<ConvParams<S>> align_;
  std::vector<AwamParams<S>> awam_;
  CtssfmParams<S> ctssfm_;
  LinearParams<S> fc_;
};

}  // namespace diffcrn
