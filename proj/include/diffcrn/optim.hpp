#pragma once

#include "diffcrn/layers.hpp"

#include <cmath>
#include <vector>

namespace diffcrn {

/// Adam with bias correction.
template <typename S>
class Adam {
 public:
  Adam(ParamList<S> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (Parameter<S>* p : params_) {
      m_.push_back(Mat<S>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Mat<S>::Zero(p->value.rows(), p->value.cols()));
    }
  }

  void zero_grad() { zero_grads(params_); }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const S step_size = static_cast<S>(lr_ / c1);
    const S inv_c2 = static_cast<S>(1.0 / c2);
    const S b1 = static_cast<S>(beta1_), b2 = static_cast<S>(beta2_), eps = static_cast<S>(eps_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Parameter<S>& p = *params_[i];
      m_[i] = b1 * m_[i] + (S(1) - b1) * p.grad;
      v_[i] = b2 * v_[i] + (S(1) - b2) * p.grad.cwiseAbs2();
      p.value.array() -= step_size * m_[i].array() / ((v_[i].array() * inv_c2).sqrt() + eps);
    }
  }

  long long steps() const { return t_; }
  const ParamList<S>& params() const { return params_; }
  std::vector<Mat<S>>& first_moments() { return m_; }
  std::vector<Mat<S>>& second_moments() { return v_; }
  void set_steps(long long t) { t_ = t; }

 private:
  ParamList<S> params_;
  double lr_, beta1_, beta2_, eps_;
  long long t_ = 0;
  std::vector<Mat<S>> m_, v_;
};

}  // namespace diffcrn
