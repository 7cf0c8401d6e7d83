#pragma once

// Spectral-angle ranking of diffusion timesteps.

#include "diffcrn/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

namespace diffcrn {

inline constexpr double kSamNormGuard = 1e-12;

/// Per-token spectral angle arccos(<a, b> / (|a| |b|)) in radians. Inputs are
/// token-major, so each row is one pixel spectrum. Evaluated as
/// 2 atan2(|a^ - b^|, |a^ + b^|) on unit vectors, which equals the arccos form
/// but stays exact for identical spectra. With `guard` > 0 norms are floored
/// at it; with guard == 0 a zero spectrum is an error.
template <typename S>
Vec<double> sam_map(const Mat<S>& x0_hat, const Mat<S>& x0, double guard = kSamNormGuard) {
  require_shape<S>(x0, x0_hat.rows(), x0_hat.cols(), "sam_map");
  Vec<double> out(x0.rows());
  for (Eigen::Index r = 0; r < x0.rows(); ++r) {
    const Eigen::RowVectorXd a = x0_hat.row(r).template cast<double>();
    const Eigen::RowVectorXd b = x0.row(r).template cast<double>();
    const double na = a.norm();
    const double nb = b.norm();
    if (guard <= 0.0 && (na == 0.0 || nb == 0.0)) throw Error("sam_map: all-zero spectrum at row " + std::to_string(r));
    const Eigen::RowVectorXd ua = a / std::max(na, guard);
    const Eigen::RowVectorXd ub = b / std::max(nb, guard);
    out(r) = std::clamp(2.0 * std::atan2((ua - ub).norm(), (ua + ub).norm()), 0.0, std::numbers::pi);
  }
  return out;
}

struct TimestepRanking {
  std::vector<int> candidates;  // ascending
  std::vector<double> mean_sam;
  std::vector<int> selected;    // ascending
};

/// The k candidates with the smallest mean SAM (ties to the smaller t),
/// returned in ascending t order.
inline std::vector<int> select_top_k(const TimestepRanking& ranking, int k) {
  const int n = static_cast<int>(ranking.candidates.size());
  require(static_cast<int>(ranking.mean_sam.size()) == n, "select_top_k: ranking is inconsistent");
  require(k >= 1 && k <= n, "select_top_k: k = " + std::to_string(k) + " exceeds the " + std::to_string(n) +
                                " candidates");
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (ranking.mean_sam[a] != ranking.mean_sam[b]) return ranking.mean_sam[a] < ranking.mean_sam[b];
    return ranking.candidates[a] < ranking.candidates[b];
  });
  std::vector<int> out;
  for (int i = 0; i < k; ++i) out.push_back(ranking.candidates[order[i]]);
  std::sort(out.begin(), out.end());
  return out;
}

/// All t in [1, T] at stride max(1, T / 100) unless an explicit stride is given.
inline std::vector<int> default_candidates(int T, int stride = 0) {
  require(T >= 1, "default_candidates: T must be >= 1");
  if (stride <= 0) stride = std::max(1, T / 100);
  std::vector<int> out;
  for (int t = 1; t <= T; t += stride) out.push_back(t);
  return out;
}

/// (x_t, geometry, per-instance t) -> eps_hat
template <typename S>
using BatchNoisePredictor = std::function<Mat<S>(const Mat<S>&, const Geometry&, const std::vector<int>&)>;

/// For every candidate t: noise the probe patches with seeded eps, predict
/// eps_hat, reconstruct x0_hat and average the per-pixel spectral angle over
/// all pixels of all probes.
template <typename S>
TimestepRanking rank_timesteps(const BatchNoisePredictor<S>& denoiser, const NoiseSchedule& sched,
                               const std::vector<Mat<S>>& probes, int patch, const std::vector<int>& candidates,
                               int k, std::uint64_t seed, int chunk = 64) {
  require(!probes.empty(), "rank_timesteps: empty probe set");
  require(!candidates.empty(), "rank_timesteps: empty candidate list");
  require(chunk >= 1, "rank_timesteps: chunk must be positive");
  TimestepRanking ranking;
  ranking.candidates = candidates;
  std::sort(ranking.candidates.begin(), ranking.candidates.end());
  const Eigen::Index tokens = static_cast<Eigen::Index>(patch) * patch;
  const Eigen::Index bands = probes.front().cols();
  for (int t : ranking.candidates) {
    sched.check(t);
    Engine rng = substream(seed, "rank.noise", static_cast<std::uint64_t>(t));
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t begin = 0; begin < probes.size(); begin += chunk) {
      const std::size_t end = std::min(probes.size(), begin + static_cast<std::size_t>(chunk));
      const Geometry geo{static_cast<int>(end - begin), patch, patch};
      Mat<S> x0(geo.rows(), bands);
      for (std::size_t i = begin; i < end; ++i) {
        require(probes[i].rows() == tokens && probes[i].cols() == bands, "rank_timesteps: probe shape mismatch");
        x0.middleRows((i - begin) * tokens, tokens) = probes[i];
      }
      Mat<S> eps = gaussian<S>(x0.rows(), x0.cols(), rng);
      const std::vector<int> ts(static_cast<std::size_t>(geo.batch), t);
      Mat<S> x_t = q_sample_batch<S>(x0, geo, ts, eps, sched);
      Mat<S> eps_hat = denoiser(x_t, geo, ts);
      Mat<S> x0_hat = predict_x0<S>(x_t, eps_hat, t, sched);
      Vec<double> angles = sam_map<S>(x0_hat, x0);
      total += angles.sum();
      count += static_cast<std::size_t>(angles.size());
    }
    // Nanoradian resolution, so numerically indistinguishable timesteps tie.
    ranking.mean_sam.push_back(std::round(total / static_cast<double>(count) * 1e9) / 1e9);
  }
  ranking.selected = select_top_k(ranking, k);
  return ranking;
}

/// Tab-separated report: header, then "t, mean_sam, selected" per candidate.
inline std::string format_ranking(const TimestepRanking& r) {
  std::string out = "t\tmean_sam\tselected\n";
  char buf[96];
  for (std::size_t i = 0; i < r.candidates.size(); ++i) {
    const bool sel = std::find(r.selected.begin(), r.selected.end(), r.candidates[i]) != r.selected.end();
    std::snprintf(buf, sizeof(buf), "%d\t%.9e\t%d\n", r.candidates[i], r.mean_sam[i], sel ? 1 : 0);
    out += buf;
  }
  return out;
}

inline TimestepRanking parse_ranking(const std::string& text) {
  TimestepRanking r;
  std::size_t pos = text.find('\n');
  require(pos != std::string::npos && text.substr(0, pos) == "t\tmean_sam\tselected", "ranking report: bad header");
  ++pos;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    if (line.empty()) continue;
    int t = 0, sel = 0;
    double m = 0.0;
    require(std::sscanf(line.c_str(), "%d\t%lf\t%d", &t, &m, &sel) == 3, "ranking report: bad line '" + line + "'");
    r.candidates.push_back(t);
    r.mean_sam.push_back(m);
    if (sel != 0) r.selected.push_back(t);
  }
  return r;
}

/// Spearman rank correlation (average ranks for ties).
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size() && x.size() >= 2, "spearman: need two equal-length samples");
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j);
      for (std::size_t q = i; q <= j; ++q) r[idx[q]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x);
  const auto ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxx > 0 && syy > 0 ? sxy / std::sqrt(sxx * syy) : 0.0;
}

}  // namespace diffcrn
