#pragma once

// Closed-form Gaussian diffusion: schedule, forward noising, posterior
// variance, ancestral steps and the one-shot clean-instance estimate.

#include "diffcrn/rng.hpp"
#include "diffcrn/tensor.hpp"

#include <cmath>
#include <functional>
#include <vector>

namespace diffcrn {

/// Per-timestep tables for t = 1..T (stored at index t-1). alpha_bar(0) is 1.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar_table;

  double beta_at(int t) const { return beta[check(t)]; }
  double alpha_at(int t) const { return alpha[check(t)]; }
  double alpha_bar(int t) const {
    if (t == 0) return 1.0;
    return alpha_bar_table[check(t)];
  }

  int check(int t) const {
    require(t >= 1 && t <= T, "timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
    return t - 1;
  }
};

/// Linear beta schedule from beta_start to beta_end over T steps.
inline NoiseSchedule make_schedule(int T, double beta_start = 1e-4, double beta_end = 0.02) {
  require(T >= 1, "make_schedule: T must be >= 1");
  require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
          "make_schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(T);
  s.alpha.resize(T);
  s.alpha_bar_table.resize(T);
  double running = 1.0;
  for (int i = 0; i < T; ++i) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(i) / (T - 1);
    s.beta[i] = beta_start + (beta_end - beta_start) * frac;
    s.alpha[i] = 1.0 - s.beta[i];
    running *= s.alpha[i];
    s.alpha_bar_table[i] = running;
  }
  return s;
}

template <typename S>
struct NoisyInstance {
  Mat<S> x_t;
  int t = 0;
  Mat<S> eps;
};

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
template <typename S>
NoisyInstance<S> q_sample(const Mat<S>& x0, int t, const Mat<S>& eps, const NoiseSchedule& sched) {
  require_shape<S>(eps, x0.rows(), x0.cols(), "q_sample");
  const double ab = sched.alpha_bar(sched.check(t) + 1);
  const S a = static_cast<S>(std::sqrt(ab));
  const S b = static_cast<S>(std::sqrt(1.0 - ab));
  return {a * x0 + b * eps, t, eps};
}

/// Batched q_sample with one timestep per instance of `geo`.
template <typename S>
Mat<S> q_sample_batch(const Mat<S>& x0, const Geometry& geo, const std::vector<int>& ts, const Mat<S>& eps,
                      const NoiseSchedule& sched) {
  require_shape<S>(eps, x0.rows(), x0.cols(), "q_sample_batch");
  require(x0.rows() == geo.rows() && static_cast<int>(ts.size()) == geo.batch, "q_sample_batch: geometry mismatch");
  const int n = geo.tokens();
  Mat<S> out(x0.rows(), x0.cols());
  for (int b = 0; b < geo.batch; ++b) {
    const double ab = sched.alpha_bar(ts[b]);
    sched.check(ts[b]);
    out.middleRows(b * n, n) = static_cast<S>(std::sqrt(ab)) * x0.middleRows(b * n, n) +
                               static_cast<S>(std::sqrt(1.0 - ab)) * eps.middleRows(b * n, n);
  }
  return out;
}

/// sigma_t^2 = (1 - abar_{t-1}) / (1 - abar_t) * beta_t, with abar_0 = 1.
inline double posterior_variance(int t, const NoiseSchedule& sched) {
  sched.check(t);
  return (1.0 - sched.alpha_bar(t - 1)) / (1.0 - sched.alpha_bar(t)) * sched.beta_at(t);
}

/// One ancestral step
///   x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t z.
/// The final step (t = 1) must not add noise.
template <typename S>
Mat<S> p_sample_step(const Mat<S>& x_t, const Mat<S>& eps_hat, int t, const Mat<S>& z, const NoiseSchedule& sched) {
  require_shape<S>(eps_hat, x_t.rows(), x_t.cols(), "p_sample_step eps_hat");
  require_shape<S>(z, x_t.rows(), x_t.cols(), "p_sample_step z");
  sched.check(t);
  if (t == 1 && !z.isZero(0)) throw Error("p_sample_step: z must be zero at t = 1");
  const double alpha = sched.alpha_at(t);
  const double beta = sched.beta_at(t);
  const double ab = sched.alpha_bar(t);
  const S inv_sqrt_alpha = static_cast<S>(1.0 / std::sqrt(alpha));
  // beta -> 0 gives abar_t -> abar_{t-1}; guard the 0/0 at t = 1 with abar = 1.
  const S eps_coef = ab < 1.0 ? static_cast<S>(beta / std::sqrt(1.0 - ab)) : S(0);
  const S sigma = static_cast<S>(std::sqrt(std::max(0.0, ab < 1.0 ? posterior_variance(t, sched) : 0.0)));
  return inv_sqrt_alpha * (x_t - eps_coef * eps_hat) + sigma * z;
}

/// One-shot estimate x0_hat = (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t).
template <typename S>
Mat<S> predict_x0(const Mat<S>& x_t, const Mat<S>& eps_hat, int t, const NoiseSchedule& sched) {
  require_shape<S>(eps_hat, x_t.rows(), x_t.cols(), "predict_x0");
  const double ab = sched.alpha_bar(sched.check(t) + 1);
  return (x_t - static_cast<S>(std::sqrt(1.0 - ab)) * eps_hat) / static_cast<S>(std::sqrt(ab));
}

/// Coefficients of predict_x0 for each instance: x0_hat = a[b] x_t - c[b] eps_hat.
template <typename S>
void predict_x0_coefficients(const std::vector<int>& ts, const NoiseSchedule& sched, std::vector<S>& a,
                             std::vector<S>& c) {
  a.resize(ts.size());
  c.resize(ts.size());
  for (std::size_t b = 0; b < ts.size(); ++b) {
    const double ab = sched.alpha_bar(sched.check(ts[b]) + 1);
    a[b] = static_cast<S>(1.0 / std::sqrt(ab));
    c[b] = static_cast<S>(std::sqrt(1.0 - ab) / std::sqrt(ab));
  }
}

/// Noise predictor used by the sampler: (x_t, t) -> eps_hat of the same shape.
template <typename S>
using NoisePredictor = std::function<Mat<S>(const Mat<S>&, int)>;

/// Ancestral sampling from N(0, I) through t = T..1. All draws come from the
/// "sample" substream of `seed`.
template <typename S>
Mat<S> sample_loop(const NoisePredictor<S>& denoiser, Eigen::Index rows, Eigen::Index cols,
                   const NoiseSchedule& sched, std::uint64_t seed) {
  Engine rng = substream(seed, "sample");
  Mat<S> x = gaussian<S>(rows, cols, rng);
  for (int t = sched.T; t >= 1; --t) {
    Mat<S> eps_hat = denoiser(x, t);
    require(eps_hat.rows() == rows && eps_hat.cols() == cols, "sample_loop: denoiser output shape differs from input");
    Mat<S> z = t > 1 ? gaussian<S>(rows, cols, rng) : Mat<S>::Zero(rows, cols);
    x = p_sample_step<S>(x, eps_hat, t, z, sched);
  }
  return x;
}

}  // namespace diffcrn
