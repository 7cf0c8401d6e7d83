#pragma once

// Central finite-difference check of reverse-mode gradients, shared by the
// gradient suite and the acceptance run.

#include "diffcrn/autograd.hpp"
#include "diffcrn/rng.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace diffcrn::testing {

constexpr double kStep = 1e-6;
constexpr double kRelTol = 1e-4;
// Entries whose gradient is this small are compared on an absolute scale of
// kRelTol * kFloor; the central difference itself is only good to ~1e-10 there.
constexpr double kFloor = 1e-6;
constexpr int kSamples = 24;

using LossFn = std::function<Var(Graph<double>&)>;

struct Report {
  int checked = 0;
  double worst = 0.0;
  std::vector<std::string> failures;
};

/// Compares backward() against central differences on `samples` entries drawn
/// at random from all parameters.
inline Report check(const ParamList<double>& params, const LossFn& loss, std::uint64_t seed, int samples = kSamples) {
  zero_grads(params);
  {
    Graph<double> g(true);
    g.backward(loss(g));
  }
  auto value = [&] {
    Graph<double> g(false);
    return g.scalar(loss(g));
  };
  std::vector<std::pair<int, Eigen::Index>> all;
  for (int p = 0; p < static_cast<int>(params.size()); ++p)
    for (Eigen::Index i = 0; i < params[p]->value.size(); ++i) all.emplace_back(p, i);
  Engine rng(seed);
  std::shuffle(all.begin(), all.end(), rng);
  if (static_cast<int>(all.size()) > samples) all.resize(samples);
  Report r;
  for (auto [p, i] : all) {
    double& x = params[p]->value.data()[i];
    const double x0 = x;
    x = x0 + kStep;
    const double up = value();
    x = x0 - kStep;
    const double down = value();
    x = x0;
    const double fd = (up - down) / (2 * kStep);
    const double an = params[p]->grad.data()[i];
    const double scale = std::max({std::abs(fd), std::abs(an), kFloor});
    const double rel = std::abs(fd - an) / scale;
    r.worst = std::max(r.worst, rel);
    if (rel > kRelTol) r.failures.push_back(params[p]->name + "[" + std::to_string(i) + "]");
    ++r.checked;
  }
  return r;
}

}  // namespace diffcrn::testing
