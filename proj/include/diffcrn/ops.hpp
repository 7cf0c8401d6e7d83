#pragma once

// Differentiable building blocks over token-major activations.

#include "diffcrn/autograd.hpp"

#include <cmath>
#include <numbers>
#include <vector>

namespace diffcrn::ops {

// ---------------------------------------------------------------- elementwise

template <typename S>
Var add(Graph<S>& g, Var a, Var b) {
  require_shape<S>(g.value(b), g.value(a).rows(), g.value(a).cols(), "add");
  return g.record(g.value(a) + g.value(b), {a, b}, [a, b](Graph<S>& g, Var self) {
    if (g.needs_grad(a)) g.grad(a) += g.grad(self);
    if (g.needs_grad(b)) g.grad(b) += g.grad(self);
  });
}

template <typename S>
Var sub(Graph<S>& g, Var a, Var b) {
  require_shape<S>(g.value(b), g.value(a).rows(), g.value(a).cols(), "sub");
  return g.record(g.value(a) - g.value(b), {a, b}, [a, b](Graph<S>& g, Var self) {
    if (g.needs_grad(a)) g.grad(a) += g.grad(self);
    if (g.needs_grad(b)) g.grad(b) -= g.grad(self);
  });
}

template <typename S>
Var mul(Graph<S>& g, Var a, Var b) {
  require_shape<S>(g.value(b), g.value(a).rows(), g.value(a).cols(), "mul");
  return g.record(g.value(a).cwiseProduct(g.value(b)), {a, b}, [a, b](Graph<S>& g, Var self) {
    if (g.needs_grad(a)) g.grad(a) += g.grad(self).cwiseProduct(g.value(b));
    if (g.needs_grad(b)) g.grad(b) += g.grad(self).cwiseProduct(g.value(a));
  });
}

template <typename S>
Var scale(Graph<S>& g, Var a, S s) {
  return g.record(g.value(a) * s, {a}, [a, s](Graph<S>& g, Var self) { g.grad(a) += g.grad(self) * s; });
}

template <typename S>
Var add_scalar(Graph<S>& g, Var a, S s) {
  return g.record((g.value(a).array() + s).matrix(), {a}, [a](Graph<S>& g, Var self) { g.grad(a) += g.grad(self); });
}

/// x + bias, bias is 1 x cols and broadcast over rows.
template <typename S>
Var add_row(Graph<S>& g, Var x, Var bias) {
  const Mat<S>& xv = g.value(x);
  require_shape<S>(g.value(bias), 1, xv.cols(), "add_row");
  Mat<S> out = xv.rowwise() + g.value(bias).row(0);
  return g.record(std::move(out), {x, bias}, [x, bias](Graph<S>& g, Var self) {
    if (g.needs_grad(x)) g.grad(x) += g.grad(self);
    if (g.needs_grad(bias)) g.grad(bias) += g.grad(self).colwise().sum();
  });
}

/// x * s, s is 1 x cols and broadcast over rows (per-channel scaling).
template <typename S>
Var mul_row(Graph<S>& g, Var x, Var s) {
  const Mat<S>& xv = g.value(x);
  require_shape<S>(g.value(s), 1, xv.cols(), "mul_row");
  Mat<S> out = xv.array().rowwise() * g.value(s).row(0).array();
  return g.record(std::move(out), {x, s}, [x, s](Graph<S>& g, Var self) {
    const Mat<S>& gy = g.grad(self);
    if (g.needs_grad(x)) g.grad(x).array() += gy.array().rowwise() * g.value(s).row(0).array();
    if (g.needs_grad(s)) g.grad(s) += gy.cwiseProduct(g.value(x)).colwise().sum();
  });
}

template <typename S>
Var matmul(Graph<S>& g, Var a, Var b) {
  require(g.value(a).cols() == g.value(b).rows(), "matmul: inner dimension mismatch");
  Mat<S> out = g.value(a) * g.value(b);
  return g.record(std::move(out), {a, b}, [a, b](Graph<S>& g, Var self) {
    const Mat<S>& gy = g.grad(self);
    if (g.needs_grad(a)) g.grad(a).noalias() += gy * g.value(b).transpose();
    if (g.needs_grad(b)) g.grad(b).noalias() += g.value(a).transpose() * gy;
  });
}

/// x W + b. `b` may be an invalid Var for a bias-free projection.
template <typename S>
Var linear(Graph<S>& g, Var x, Var w, Var b = {}) {
  Var y = matmul(g, x, w);
  return b.valid() ? add_row(g, y, b) : y;
}

// ---------------------------------------------------------------- activations

template <typename S>
Var gelu(Graph<S>& g, Var x) {
  const Mat<S>& xv = g.value(x);
  const S inv_sqrt2 = S(1) / std::sqrt(S(2));
  Mat<S> out = xv.unaryExpr([inv_sqrt2](S v) { return S(0.5) * v * (S(1) + std::erf(v * inv_sqrt2)); });
  return g.record(std::move(out), {x}, [x, inv_sqrt2](Graph<S>& g, Var self) {
    const S inv_sqrt_2pi = S(1) / std::sqrt(S(2) * std::numbers::pi_v<S>);
    Mat<S> d = g.value(x).unaryExpr([&](S v) {
      return S(0.5) * (S(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(S(-0.5) * v * v);
    });
    g.grad(x) += g.grad(self).cwiseProduct(d);
  });
}

template <typename S>
Var sigmoid(Graph<S>& g, Var x) {
  Mat<S> out = g.value(x).unaryExpr([](S v) { return S(1) / (S(1) + std::exp(-v)); });
  return g.record(std::move(out), {x}, [x](Graph<S>& g, Var self) {
    const Mat<S>& y = g.value(self);
    g.grad(x).array() += g.grad(self).array() * y.array() * (S(1) - y.array());
  });
}

template <typename S>
Var silu(Graph<S>& g, Var x) {
  Mat<S> out = g.value(x).unaryExpr([](S v) { return v / (S(1) + std::exp(-v)); });
  return g.record(std::move(out), {x}, [x](Graph<S>& g, Var self) {
    Mat<S> d = g.value(x).unaryExpr([](S v) {
      S s = S(1) / (S(1) + std::exp(-v));
      return s * (S(1) + v * (S(1) - s));
    });
    g.grad(x) += g.grad(self).cwiseProduct(d);
  });
}

template <typename S>
Var relu(Graph<S>& g, Var x) {
  Mat<S> out = g.value(x).cwiseMax(S(0));
  return g.record(std::move(out), {x}, [x](Graph<S>& g, Var self) {
    g.grad(x).array() += (g.value(x).array() > S(0)).select(g.grad(self).array(), S(0));
  });
}

// ---------------------------------------------------------------- convolution

namespace detail {

template <typename S>
Mat<S> im2col(const Mat<S>& x, const Geometry& geo, int k) {
  const int pad = k / 2;
  const Eigen::Index c = x.cols();
  const int n = geo.tokens();
  Mat<S> cols = Mat<S>::Zero(geo.rows(), k * k * c);
  for (int b = 0; b < geo.batch; ++b) {
    for (int i = 0; i < geo.height; ++i) {
      for (int j = 0; j < geo.width; ++j) {
        const int r = b * n + i * geo.width + j;
        for (int di = 0; di < k; ++di) {
          const int ii = i + di - pad;
          if (ii < 0 || ii >= geo.height) continue;
          for (int dj = 0; dj < k; ++dj) {
            const int jj = j + dj - pad;
            if (jj < 0 || jj >= geo.width) continue;
            cols.block(r, (di * k + dj) * c, 1, c) = x.row(b * n + ii * geo.width + jj);
          }
        }
      }
    }
  }
  return cols;
}

template <typename S>
void col2im_add(const Mat<S>& cols, const Geometry& geo, int k, Mat<S>& dx) {
  const int pad = k / 2;
  const Eigen::Index c = dx.cols();
  const int n = geo.tokens();
  for (int b = 0; b < geo.batch; ++b) {
    for (int i = 0; i < geo.height; ++i) {
      for (int j = 0; j < geo.width; ++j) {
        const int r = b * n + i * geo.width + j;
        for (int di = 0; di < k; ++di) {
          const int ii = i + di - pad;
          if (ii < 0 || ii >= geo.height) continue;
          for (int dj = 0; dj < k; ++dj) {
            const int jj = j + dj - pad;
            if (jj < 0 || jj >= geo.width) continue;
            dx.row(b * n + ii * geo.width + jj) += cols.block(r, (di * k + dj) * c, 1, c);
          }
        }
      }
    }
  }
}

inline int instance_of(int row, const Geometry& geo) { return row / geo.tokens(); }

}  // namespace detail

/// Zero-padded "same" convolution with a k x k kernel.
/// `w` is (k*k*in) x out with offset-major rows: row (di*k+dj)*in + c.
template <typename S>
Var conv2d(Graph<S>& g, Var x, const Geometry& geo, Var w, Var b, int k) {
  const Mat<S>& xv = g.value(x);
  require(xv.rows() == geo.rows(), "conv2d: row count does not match geometry");
  require(g.value(w).rows() == k * k * xv.cols(), "conv2d: weight rows must be k*k*in_channels");
  if (k == 1) return linear(g, x, w, b);
  Mat<S> cols = detail::im2col(xv, geo, k);
  Mat<S> out = cols * g.value(w);
  if (b.valid()) out.rowwise() += g.value(b).row(0);
  const bool with_bias = b.valid();
  std::initializer_list<Var> ins = {x, w, b.valid() ? b : w};
  return g.record(std::move(out), ins, [x, w, b, geo, k, with_bias, cols = std::move(cols)](Graph<S>& g, Var self) {
    const Mat<S>& gy = g.grad(self);
    if (g.needs_grad(w)) g.grad(w).noalias() += cols.transpose() * gy;
    if (with_bias && g.needs_grad(b)) g.grad(b) += gy.colwise().sum();
    if (g.needs_grad(x)) {
      Mat<S> dcols = gy * g.value(w).transpose();
      detail::col2im_add<S>(dcols, geo, k, g.grad(x));
    }
  });
}

/// Depthwise "same" convolution; `w` is (k*k) x channels.
template <typename S>
Var depthwise_conv2d(Graph<S>& g, Var x, const Geometry& geo, Var w, Var b, int k) {
  const Mat<S>& xv = g.value(x);
  require(xv.rows() == geo.rows(), "depthwise_conv2d: row count does not match geometry");
  require_shape<S>(g.value(w), k * k, xv.cols(), "depthwise_conv2d weight");
  const int pad = k / 2;
  const int n = geo.tokens();
  auto visit = [geo, k, pad, n](auto&& fn) {
    for (int bi = 0; bi < geo.batch; ++bi)
      for (int i = 0; i < geo.height; ++i)
        for (int j = 0; j < geo.width; ++j) {
          const int r = bi * n + i * geo.width + j;
          for (int di = 0; di < k; ++di) {
            const int ii = i + di - pad;
            if (ii < 0 || ii >= geo.height) continue;
            for (int dj = 0; dj < k; ++dj) {
              const int jj = j + dj - pad;
              if (jj < 0 || jj >= geo.width) continue;
              fn(r, bi * n + ii * geo.width + jj, di * k + dj);
            }
          }
        }
  };
  const Mat<S>& wv = g.value(w);
  Mat<S> out = Mat<S>::Zero(xv.rows(), xv.cols());
  visit([&](int r, int src, int o) { out.row(r) += xv.row(src).cwiseProduct(wv.row(o)); });
  if (b.valid()) out.rowwise() += g.value(b).row(0);
  const bool with_bias = b.valid();
  std::initializer_list<Var> ins = {x, w, b.valid() ? b : w};
  return g.record(std::move(out), ins, [x, w, b, with_bias, visit](Graph<S>& g, Var self) {
    const Mat<S>& gy = g.grad(self);
    const Mat<S>& xv = g.value(x);
    const Mat<S>& wv = g.value(w);
    if (g.needs_grad(x)) {
      Mat<S>& gx = g.grad(x);
      visit([&](int r, int src, int o) { gx.row(src) += gy.row(r).cwiseProduct(wv.row(o)); });
    }
    if (g.needs_grad(w)) {
      Mat<S>& gw = g.grad(w);
      visit([&](int r, int src, int o) { gw.row(o) += gy.row(r).cwiseProduct(xv.row(src)); });
    }
    if (with_bias && g.needs_grad(b)) g.grad(b) += gy.colwise().sum();
  });
}

// -------------------------------------------------------------- normalisation

/// Layer normalisation over the channels of each token.
template <typename S>
Var layer_norm(Graph<S>& g, Var x, Var gain, Var bias, S eps = S(1e-5)) {
  const Mat<S>& xv = g.value(x);
  const Eigen::Index c = xv.cols();
  require_shape<S>(g.value(gain), 1, c, "layer_norm gain");
  require_shape<S>(g.value(bias), 1, c, "layer_norm bias");
  Vec<S> mean = xv.rowwise().mean();
  Mat<S> xhat = xv.colwise() - mean;
  Vec<S> inv_std = (xhat.array().square().rowwise().mean() + eps).rsqrt().matrix();
  xhat = inv_std.asDiagonal() * xhat;
  Mat<S> out = xhat.array().rowwise() * g.value(gain).row(0).array();
  out.rowwise() += g.value(bias).row(0);
  return g.record(std::move(out), {x, gain, bias},
                  [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph<S>& g, Var self) {
                    const Mat<S>& gy = g.grad(self);
                    if (g.needs_grad(gain)) g.grad(gain) += gy.cwiseProduct(xhat).colwise().sum();
                    if (g.needs_grad(bias)) g.grad(bias) += gy.colwise().sum();
                    if (g.needs_grad(x)) {
                      Mat<S> dxhat = gy.array().rowwise() * g.value(gain).row(0).array();
                      Vec<S> m1 = dxhat.rowwise().mean();
                      Vec<S> m2 = dxhat.cwiseProduct(xhat).rowwise().mean();
                      Mat<S> dx = dxhat.colwise() - m1;
                      dx -= m2.asDiagonal() * xhat;
                      g.grad(x).noalias() += inv_std.asDiagonal() * dx;
                    }
                  });
}

/// Group normalisation: statistics per instance over all tokens and the
/// channels of each of `groups` contiguous channel groups.
template <typename S>
Var group_norm(Graph<S>& g, Var x, const Geometry& geo, int groups, Var gain, Var bias, S eps = S(1e-5)) {
  const Mat<S>& xv = g.value(x);
  const int c = static_cast<int>(xv.cols());
  require(groups > 0 && c % groups == 0, "group_norm: channels must be divisible by groups");
  require_shape<S>(g.value(gain), 1, c, "group_norm gain");
  require_shape<S>(g.value(bias), 1, c, "group_norm bias");
  const int n = geo.tokens();
  const int cg = c / groups;
  Mat<S> xhat(xv.rows(), c);
  Mat<S> inv_std(geo.batch, groups);
  for (int b = 0; b < geo.batch; ++b) {
    for (int q = 0; q < groups; ++q) {
      auto blk = xv.block(b * n, q * cg, n, cg);
      const S mean = blk.mean();
      const S var = (blk.array() - mean).square().mean();
      const S is = S(1) / std::sqrt(var + eps);
      inv_std(b, q) = is;
      xhat.block(b * n, q * cg, n, cg) = ((blk.array() - mean) * is).matrix();
    }
  }
  Mat<S> out = xhat.array().rowwise() * g.value(gain).row(0).array();
  out.rowwise() += g.value(bias).row(0);
  return g.record(std::move(out), {x, gain, bias},
                  [x, gain, bias, geo, groups, n, cg, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                      Graph<S>& g, Var self) {
                    const Mat<S>& gy = g.grad(self);
                    if (g.needs_grad(gain)) g.grad(gain) += gy.cwiseProduct(xhat).colwise().sum();
                    if (g.needs_grad(bias)) g.grad(bias) += gy.colwise().sum();
                    if (!g.needs_grad(x)) return;
                    Mat<S> dxhat = gy.array().rowwise() * g.value(gain).row(0).array();
                    Mat<S>& gx = g.grad(x);
                    for (int b = 0; b < geo.batch; ++b) {
                      for (int q = 0; q < groups; ++q) {
                        auto d = dxhat.block(b * n, q * cg, n, cg);
                        auto h = xhat.block(b * n, q * cg, n, cg);
                        const S m1 = d.mean();
                        const S m2 = d.cwiseProduct(h).mean();
                        gx.block(b * n, q * cg, n, cg).array() +=
                            inv_std(b, q) * (d.array() - m1 - h.array() * m2);
                      }
                    }
                  });
}

// ------------------------------------------------------ per-instance broadcast

/// x * m, where m is batch x channels and broadcast over each instance's tokens.
template <typename S>
Var instance_mul(Graph<S>& g, Var x, const Geometry& geo, Var m) {
  const Mat<S>& xv = g.value(x);
  require(xv.rows() == geo.rows(), "instance_mul: row count does not match geometry");
  require_shape<S>(g.value(m), geo.batch, xv.cols(), "instance_mul");
  const int n = geo.tokens();
  Mat<S> out(xv.rows(), xv.cols());
  const Mat<S>& mv = g.value(m);
  for (int b = 0; b < geo.batch; ++b) {
    out.middleRows(b * n, n) = xv.middleRows(b * n, n).array().rowwise() * mv.row(b).array();
  }
  return g.record(std::move(out), {x, m}, [x, m, geo, n](Graph<S>& g, Var self) {
    const Mat<S>& gy = g.grad(self);
    for (int b = 0; b < geo.batch; ++b) {
      if (g.needs_grad(x)) {
        g.grad(x).middleRows(b * n, n).array() += gy.middleRows(b * n, n).array().rowwise() * g.value(m).row(b).array();
      }
      if (g.needs_grad(m)) {
        g.grad(m).row(b) += gy.middleRows(b * n, n).cwiseProduct(g.value(x).middleRows(b * n, n)).colwise().sum();
      }
    }
  });
}

/// x + a, where a is batch x channels and broadcast over each instance's tokens.
template <typename S>
Var instance_add(Graph<S>& g, Var x, const Geometry& geo, Var a) {
  const Mat<S>& xv = g.value(x);
  require(xv.rows() == geo.rows(), "instance_add: row count does not match geometry");
  require_shape<S>(g.value(a), geo.batch, xv.cols(), "instance_add");
  const int n = geo.tokens();
  Mat<S> out = xv;
  for (int b = 0; b < geo.batch; ++b) out.middleRows(b * n, n).rowwise() += g.value(a).row(b);
  return g.record(std::move(out), {x, a}, [x, a, geo, n](Graph<S>& g, Var self) {
    const Mat<S>& gy = g.grad(self);
    if (g.needs_grad(x)) g.grad(x) += gy;
    if (g.needs_grad(a)) {
      for (int b = 0; b < geo.batch; ++b) g.grad(a).row(b) += gy.middleRows(b * n, n).colwise().sum();
    }
  });
}

/// Multiplies every element of instance b by the constant coef[b].
template <typename S>
Var instance_scale(Graph<S>& g, Var x, const Geometry& geo, std::vector<S> coef) {
  const Mat<S>& xv = g.value(x);
  require(xv.rows() == geo.rows(), "instance_scale: row count does not match geometry");
  require(static_cast<int>(coef.size()) == geo.batch, "instance_scale: one coefficient per instance");
  const int n = geo.tokens();
  Mat<S> out = xv;
  for (int b = 0; b < geo.batch; ++b) out.middleRows(b * n, n) *= coef[b];
  return g.record(std::move(out), {x}, [x, n, coef = std::move(coef)](Graph<S>& g, Var self) {
    const Mat<S>& gy = g.grad(self);
    for (std::size_t b = 0; b < coef.size(); ++b) g.grad(x).middleRows(b * n, n) += gy.middleRows(b * n, n) * coef[b];
  });
}

// -------------------------------------------------------------------- pooling

/// Spatial average per instance: rows -> batch x channels.
template <typename S>
Var mean_pool(Graph<S>& g, Var x, const Geometry& geo) {
  const Mat<S>& xv = g.value(x);
  require(xv.rows() == geo.rows(), "mean_pool: row count does not match geometry");
  const int n = geo.tokens();
  Mat<S> out(geo.batch, xv.cols());
  for (int b = 0; b < geo.batch; ++b) out.row(b) = xv.middleRows(b * n, n).colwise().mean();
  return g.record(std::move(out), {x}, [x, geo, n](Graph<S>& g, Var self) {
    const Mat<S>& gy = g.grad(self);
    Mat<S>& gx = g.grad(x);
    for (int b = 0; b < geo.batch; ++b) gx.middleRows(b * n, n).rowwise() += gy.row(b) / S(n);
  });
}

/// Spatial maximum per instance: rows -> batch x channels.
template <typename S>
Var max_pool(Graph<S>& g, Var x, const Geometry& geo) {
  const Mat<S>& xv = g.value(x);
  require(xv.rows() == geo.rows(), "max_pool: row count does not match geometry");
  const int n = geo.tokens();
  const Eigen::Index c = xv.cols();
  Mat<S> out(geo.batch, c);
  std::vector<int> arg(static_cast<std::size_t>(geo.batch * c));
  for (int b = 0; b < geo.batch; ++b) {
    for (Eigen::Index ch = 0; ch < c; ++ch) {
      Eigen::Index r;
      out(b, ch) = xv.col(ch).segment(b * n, n).maxCoeff(&r);
      arg[b * c + ch] = b * n + static_cast<int>(r);
    }
  }
  return g.record(std::move(out), {x}, [x, geo, c, arg = std::move(arg)](Graph<S>& g, Var self) {
    const Mat<S>& gy = g.grad(self);
    Mat<S>& gx = g.grad(x);
    for (int b = 0; b < geo.batch; ++b)
      for (Eigen::Index ch = 0; ch < c; ++ch) gx(arg[b * c + ch], ch) += gy(b, ch);
  });
}

// ------------------------------------------------------------------ attention

namespace detail {

template <typename S>
void softmax_rows_inplace(Mat<S>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const S mx = m.row(r).maxCoeff();
    m.row(r) = (m.row(r).array() - mx).exp();
    m.row(r) /= m.row(r).sum();
  }
}

// dS = A .* (dA - rowsum(dA .* A))
template <typename S>
Mat<S> softmax_rows_backward(const Mat<S>& a, const Mat<S>& da) {
  Vec<S> dot = a.cwiseProduct(da).rowwise().sum();
  Mat<S> ds = da.colwise() - dot;
  return a.cwiseProduct(ds);
}

}  // namespace detail

/// Single-head attention over the spatial tokens of each instance:
/// softmax(Q K^T / sqrt(channels)) V. Returns the attention maps in `maps`
/// when non-null.
template <typename S>
Var spatial_attention(Graph<S>& g, Var q, Var k, Var v, const Geometry& geo, std::vector<Mat<S>>* maps = nullptr) {
  const Mat<S>& qv = g.value(q);
  require(qv.rows() == geo.rows(), "spatial_attention: row count does not match geometry");
  require_shape<S>(g.value(k), qv.rows(), qv.cols(), "spatial_attention key");
  require_shape<S>(g.value(v), qv.rows(), qv.cols(), "spatial_attention value");
  const int n = geo.tokens();
  const S scale = S(1) / std::sqrt(S(qv.cols()));
  std::vector<Mat<S>> attn(static_cast<std::size_t>(geo.batch));
  Mat<S> out(qv.rows(), qv.cols());
  for (int b = 0; b < geo.batch; ++b) {
    Mat<S> s = (qv.middleRows(b * n, n) * g.value(k).middleRows(b * n, n).transpose()) * scale;
    detail::softmax_rows_inplace(s);
    out.middleRows(b * n, n).noalias() = s * g.value(v).middleRows(b * n, n);
    attn[b] = std::move(s);
  }
  if (maps != nullptr) *maps = attn;
  return g.record(std::move(out), {q, k, v}, [q, k, v, geo, n, scale, attn = std::move(attn)](Graph<S>& g, Var self) {
    const Mat<S>& gy = g.grad(self);
    for (int b = 0; b < geo.batch; ++b) {
      auto dy = gy.middleRows(b * n, n);
      const Mat<S>& a = attn[b];
      if (g.needs_grad(v)) g.grad(v).middleRows(b * n, n).noalias() += a.transpose() * dy;
      if (!g.needs_grad(q) && !g.needs_grad(k)) continue;
      Mat<S> da = dy * g.value(v).middleRows(b * n, n).transpose();
      Mat<S> ds = detail::softmax_rows_backward(a, da) * scale;
      if (g.needs_grad(q)) g.grad(q).middleRows(b * n, n).noalias() += ds * g.value(k).middleRows(b * n, n);
      if (g.needs_grad(k)) g.grad(k).middleRows(b * n, n).noalias() += ds.transpose() * g.value(q).middleRows(b * n, n);
    }
  });
}

/// Attention over channel tokens within contiguous channel groups. Inside
/// group i each of the C_g channels is a token whose feature vector is the
/// channel's values over all P^2 positions; scores are scaled by 1/sqrt(C_g)
/// and group outputs are concatenated in channel order.
template <typename S>
Var group_channel_attention(Graph<S>& g, Var q, Var k, Var v, const Geometry& geo, int groups,
                            std::vector<Mat<S>>* maps = nullptr) {
  const Mat<S>& qv = g.value(q);
  const int c = static_cast<int>(qv.cols());
  require(groups > 0 && c % groups == 0, "group_channel_attention: width must be divisible by the group count");
  require(qv.rows() == geo.rows(), "group_channel_attention: row count does not match geometry");
  require_shape<S>(g.value(k), qv.rows(), qv.cols(), "group_channel_attention key");
  require_shape<S>(g.value(v), qv.rows(), qv.cols(), "group_channel_attention value");
  const int n = geo.tokens();
  const int cg = c / groups;
  const S scale = S(1) / std::sqrt(S(cg));
  std::vector<Mat<S>> attn(static_cast<std::size_t>(geo.batch * groups));
  Mat<S> out(qv.rows(), c);
  for (int b = 0; b < geo.batch; ++b) {
    for (int i = 0; i < groups; ++i) {
      auto qg = qv.block(b * n, i * cg, n, cg);
      auto kg = g.value(k).block(b * n, i * cg, n, cg);
      auto vg = g.value(v).block(b * n, i * cg, n, cg);
      Mat<S> s = (qg.transpose() * kg) * scale;
      detail::softmax_rows_inplace(s);
      out.block(b * n, i * cg, n, cg).noalias() = vg * s.transpose();
      attn[b * groups + i] = std::move(s);
    }
  }
  if (maps != nullptr) *maps = attn;
  return g.record(std::move(out), {q, k, v},
                  [q, k, v, geo, groups, n, cg, scale, attn = std::move(attn)](Graph<S>& g, Var self) {
                    const Mat<S>& gy = g.grad(self);
                    for (int b = 0; b < geo.batch; ++b) {
                      for (int i = 0; i < groups; ++i) {
                        const Mat<S>& a = attn[b * groups + i];
                        auto dy = gy.block(b * n, i * cg, n, cg);
                        auto vg = g.value(v).block(b * n, i * cg, n, cg);
                        if (g.needs_grad(v)) g.grad(v).block(b * n, i * cg, n, cg).noalias() += dy * a;
                        if (!g.needs_grad(q) && !g.needs_grad(k)) continue;
                        Mat<S> da = dy.transpose() * vg;
                        Mat<S> ds = detail::softmax_rows_backward(a, da) * scale;
                        auto qg = g.value(q).block(b * n, i * cg, n, cg);
                        auto kg = g.value(k).block(b * n, i * cg, n, cg);
                        if (g.needs_grad(q)) g.grad(q).block(b * n, i * cg, n, cg).noalias() += kg * ds.transpose();
                        if (g.needs_grad(k)) g.grad(k).block(b * n, i * cg, n, cg).noalias() += qg * ds;
                      }
                    }
                  });
}

// ------------------------------------------------------------------ reshaping

template <typename S>
Var concat_rows(Graph<S>& g, Var a, Var b) {
  const Mat<S>& av = g.value(a);
  const Mat<S>& bv = g.value(b);
  require(av.cols() == bv.cols(), "concat_rows: column mismatch");
  Mat<S> out(av.rows() + bv.rows(), av.cols());
  out.topRows(av.rows()) = av;
  out.bottomRows(bv.rows()) = bv;
  const Eigen::Index na = av.rows();
  const Eigen::Index nb = bv.rows();
  return g.record(std::move(out), {a, b}, [a, b, na, nb](Graph<S>& g, Var self) {
    if (g.needs_grad(a)) g.grad(a) += g.grad(self).topRows(na);
    if (g.needs_grad(b)) g.grad(b) += g.grad(self).bottomRows(nb);
  });
}

template <typename S>
Var slice_rows(Graph<S>& g, Var x, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && start + count <= g.value(x).rows(), "slice_rows: out of range");
  Mat<S> out = g.value(x).middleRows(start, count);
  return g.record(std::move(out), {x}, [x, start, count](Graph<S>& g, Var self) {
    g.grad(x).middleRows(start, count) += g.grad(self);
  });
}

template <typename S>
Var slice_cols(Graph<S>& g, Var x, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && start + count <= g.value(x).cols(), "slice_cols: out of range");
  Mat<S> out = g.value(x).middleCols(start, count);
  return g.record(std::move(out), {x}, [x, start, count](Graph<S>& g, Var self) {
    g.grad(x).middleCols(start, count) += g.grad(self);
  });
}

template <typename S>
Var sum_all(Graph<S>& g, Var x) {
  Mat<S> out(1, 1);
  out(0, 0) = g.value(x).sum();
  return g.record(std::move(out), {x}, [x](Graph<S>& g, Var self) { g.grad(x).array() += g.grad(self)(0, 0); });
}

template <typename S>
Var sum_squares(Graph<S>& g, Var x) {
  Mat<S> out(1, 1);
  out(0, 0) = g.value(x).squaredNorm();
  return g.record(std::move(out), {x}, [x](Graph<S>& g, Var self) {
    g.grad(x) += g.value(x) * (S(2) * g.grad(self)(0, 0));
  });
}

}  // namespace diffcrn::ops
