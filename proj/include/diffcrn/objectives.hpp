#pragma once

// Pretraining objectives: logarithmic absolute error, InfoNCE and the
// uncertainty-weighted compound loss.

#include "diffcrn/autograd.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace diffcrn {

/// Upper bound of the clipping function applied to absolute residuals.
inline constexpr double kLaeClip = 0.9999;

/// Learnable log-variances of the two regression tasks, both starting at 0.
template <typename S>
struct UncertaintyWeights {
  Parameter<S> w_diff{"uncertainty.w_diff", Mat<S>::Zero(1, 1)};
  Parameter<S> w_rec{"uncertainty.w_rec", Mat<S>::Zero(1, 1)};

  UncertaintyWeights() = default;
  UncertaintyWeights(const UncertaintyWeights&) = delete;
  UncertaintyWeights& operator=(const UncertaintyWeights&) = delete;

  S diff() const { return w_diff.value(0, 0); }
  S rec() const { return w_rec.value(0, 0); }
};

namespace ops {

/// mean(-log(1 - min(|pred - target|, 0.9999))), elementwise then averaged.
template <typename S>
Var lae(Graph<S>& g, Var pred, Var target) {
  const Mat<S>& p = g.value(pred);
  const Mat<S>& t = g.value(target);
  require_shape<S>(t, p.rows(), p.cols(), "lae_loss");
  require(!p.hasNaN() && !t.hasNaN(), "lae_loss: NaN input");
  const S clip = static_cast<S>(kLaeClip);
  Mat<S> diff = p - t;
  Mat<S> out(1, 1);
  out(0, 0) = diff.unaryExpr([clip](S e) { return -std::log1p(-std::min(std::abs(e), clip)); }).mean();
  return g.record(std::move(out), {pred, target}, [pred, target, clip, diff = std::move(diff)](Graph<S>& g, Var self) {
    const S scale = g.grad(self)(0, 0) / static_cast<S>(diff.size());
    // Clipped elements are constant in the residual.
    Mat<S> d = diff.unaryExpr([clip, scale](S e) {
      const S a = std::abs(e);
      if (a >= clip || a == S(0)) return S(0);
      return (e > 0 ? scale : -scale) / (S(1) - a);
    });
    if (g.needs_grad(pred)) g.grad(pred) += d;
    if (g.needs_grad(target)) g.grad(target) -= d;
  });
}

/// mean((pred - target)^2)
template <typename S>
Var mse(Graph<S>& g, Var pred, Var target) {
  const Mat<S>& p = g.value(pred);
  require_shape<S>(g.value(target), p.rows(), p.cols(), "mse_loss");
  Mat<S> diff = p - g.value(target);
  Mat<S> out(1, 1);
  out(0, 0) = diff.squaredNorm() / static_cast<S>(diff.size());
  return g.record(std::move(out), {pred, target}, [pred, target, diff = std::move(diff)](Graph<S>& g, Var self) {
    Mat<S> d = diff * (S(2) * g.grad(self)(0, 0) / static_cast<S>(diff.size()));
    if (g.needs_grad(pred)) g.grad(pred) += d;
    if (g.needs_grad(target)) g.grad(target) -= d;
  });
}

/// InfoNCE over the interleaved stack [raw_1, fake_1, raw_2, fake_2, ...] with
/// cosine similarity and temperature tau; each row's positive is its partner
/// and its denominator runs over every other row.
template <typename S>
Var info_nce(Graph<S>& g, Var z_raw, Var z_fake, S tau) {
  const Mat<S>& a = g.value(z_raw);
  const Mat<S>& b = g.value(z_fake);
  require(a.rows() >= 1, "info_nce: empty batch");
  require_shape<S>(b, a.rows(), a.cols(), "info_nce");
  require(tau > S(0), "info_nce: temperature must be positive");
  const Eigen::Index B = a.rows();
  const Eigen::Index n = 2 * B;
  Mat<S> z(n, a.cols());
  for (Eigen::Index k = 0; k < B; ++k) {
    z.row(2 * k) = a.row(k);
    z.row(2 * k + 1) = b.row(k);
  }
  Vec<S> norms = z.rowwise().norm();
  for (Eigen::Index i = 0; i < n; ++i) require(norms(i) > S(0), "info_nce: zero-norm embedding row");
  Mat<S> u = norms.cwiseInverse().asDiagonal() * z;
  Mat<S> sim = u * u.transpose();
  Mat<S> prob(n, n);  // softmax over k != i
  S total = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    S mx = -std::numeric_limits<S>::infinity();
    for (Eigen::Index k = 0; k < n; ++k)
      if (k != i) mx = std::max(mx, sim(i, k) / tau);
    S denom = 0;
    for (Eigen::Index k = 0; k < n; ++k) {
      prob(i, k) = k == i ? S(0) : std::exp(sim(i, k) / tau - mx);
      denom += prob(i, k);
    }
    prob.row(i) /= denom;
    const Eigen::Index partner = i ^ 1;
    total += -std::log(prob(i, partner));
  }
  Mat<S> out(1, 1);
  out(0, 0) = total / static_cast<S>(n);
  return g.record(std::move(out), {z_raw, z_fake},
                  [z_raw, z_fake, tau, B, n, u = std::move(u), norms = std::move(norms), prob = std::move(prob)](
                      Graph<S>& g, Var self) {
                    const S scale = g.grad(self)(0, 0) / (static_cast<S>(n) * tau);
                    Mat<S> dsim = prob;
                    for (Eigen::Index i = 0; i < n; ++i) dsim(i, i ^ 1) -= S(1);
                    dsim *= scale;
                    Mat<S> du = (dsim + dsim.transpose()) * u;
                    Mat<S> dz(n, u.cols());
                    for (Eigen::Index i = 0; i < n; ++i) {
                      dz.row(i) = (du.row(i) - u.row(i) * u.row(i).dot(du.row(i))) / norms(i);
                    }
                    for (Eigen::Index k = 0; k < B; ++k) {
                      if (g.needs_grad(z_raw)) g.grad(z_raw).row(k) += dz.row(2 * k);
                      if (g.needs_grad(z_fake)) g.grad(z_fake).row(k) += dz.row(2 * k + 1);
                    }
                  });
}

/// exp(-w_diff) l_diff + exp(-w_rec) l_rec + 0.5 l_con + w_diff + w_rec
template <typename S>
Var compound(Graph<S>& g, Var l_diff, Var l_rec, Var l_con, Var w_diff, Var w_rec) {
  const S ld = g.scalar(l_diff), lr = g.scalar(l_rec), lc = g.scalar(l_con);
  const S wd = g.scalar(w_diff), wr = g.scalar(w_rec);
  require(std::isfinite(ld) && std::isfinite(lr) && std::isfinite(lc) && std::isfinite(wd) && std::isfinite(wr),
          "compound_loss: non-finite input");
  Mat<S> out(1, 1);
  out(0, 0) = std::exp(-wd) * ld + std::exp(-wr) * lr + S(0.5) * lc + wd + wr;
  return g.record(std::move(out), {l_diff, l_rec, l_con, w_diff, w_rec},
                  [l_diff, l_rec, l_con, w_diff, w_rec](Graph<S>& g, Var self) {
                    const S gy = g.grad(self)(0, 0);
                    const S ed = std::exp(-g.scalar(w_diff));
                    const S er = std::exp(-g.scalar(w_rec));
                    if (g.needs_grad(l_diff)) g.grad(l_diff)(0, 0) += gy * ed;
                    if (g.needs_grad(l_rec)) g.grad(l_rec)(0, 0) += gy * er;
                    if (g.needs_grad(l_con)) g.grad(l_con)(0, 0) += gy * S(0.5);
                    if (g.needs_grad(w_diff)) g.grad(w_diff)(0, 0) += gy * (S(1) - ed * g.scalar(l_diff));
                    if (g.needs_grad(w_rec)) g.grad(w_rec)(0, 0) += gy * (S(1) - er * g.scalar(l_rec));
                  });
}

}  // namespace ops

// Value-level entry points.

template <typename S>
S lae_loss(const Mat<S>& eps, const Mat<S>& eps_hat) {
  Graph<S> g(false);
  return g.scalar(ops::lae(g, g.constant(eps_hat), g.constant(eps)));
}

/// Reconstruction loss: the LAE form applied to (x0_hat, x0).
template <typename S>
S rec_loss(const Mat<S>& x0_hat, const Mat<S>& x0) {
  return lae_loss<S>(x0, x0_hat);
}

template <typename S>
S info_nce_loss(const Mat<S>& z_raw, const Mat<S>& z_fake, S tau) {
  Graph<S> g(false);
  return g.scalar(ops::info_nce(g, g.constant(z_raw), g.constant(z_fake), tau));
}

template <typename S>
S compound_loss(S l_diff, S l_rec, S l_con, S w_diff, S w_rec) {
  Graph<S> g(false);
  auto c = [&g](S v) { return g.constant(Mat<S>::Constant(1, 1, v)); };
  return g.scalar(ops::compound(g, c(l_diff), c(l_rec), c(l_con), c(w_diff), c(w_rec)));
}

}  // namespace diffcrn
