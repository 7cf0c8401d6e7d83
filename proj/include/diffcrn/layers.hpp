#pragma once

// Parameter bundles shared by the networks.

#include "diffcrn/ops.hpp"
#include "diffcrn/rng.hpp"

#include <string>
#include <vector>

namespace diffcrn {

template <typename S>
using ParamList = std::vector<Parameter<S>*>;

template <typename S>
Parameter<S> normal_param(std::string name, Eigen::Index rows, Eigen::Index cols, double stddev, Engine& rng) {
  return Parameter<S>(std::move(name), (gaussian<S>(rows, cols, rng) * static_cast<S>(stddev)).eval());
}

template <typename S>
Parameter<S> const_param(std::string name, Eigen::Index rows, Eigen::Index cols, double value) {
  return Parameter<S>(std::move(name), Mat<S>::Constant(rows, cols, static_cast<S>(value)));
}

/// Convolution weight (k*k*in x out) and bias (1 x out).
template <typename S>
struct ConvParams {
  Parameter<S> weight;
  Parameter<S> bias;
  int kernel = 1;

  ConvParams() = default;
  ConvParams(const std::string& name, int in, int out, int k, Engine& rng, double gain = 2.0)
      : weight(normal_param<S>(name + ".weight", k * k * in, out, std::sqrt(gain / (k * k * in)), rng)),
        bias(const_param<S>(name + ".bias", 1, out, 0.0)),
        kernel(k) {}

  Var apply(Graph<S>& g, Var x, const Geometry& geo) { return ops::conv2d(g, x, geo, g.param(weight), g.param(bias), kernel); }
  void collect(ParamList<S>& out) { out.insert(out.end(), {&weight, &bias}); }
};

template <typename S>
struct NormParams {
  Parameter<S> gain;
  Parameter<S> bias;

  NormParams() = default;
  NormParams(const std::string& name, int channels)
      : gain(const_param<S>(name + ".gain", 1, channels, 1.0)), bias(const_param<S>(name + ".bias", 1, channels, 0.0)) {}

  Var layer_norm(Graph<S>& g, Var x) { return ops::layer_norm(g, x, g.param(gain), g.param(bias)); }
  Var group_norm(Graph<S>& g, Var x, const Geometry& geo, int groups) {
    return ops::group_norm(g, x, geo, groups, g.param(gain), g.param(bias));
  }
  void collect(ParamList<S>& out) { out.insert(out.end(), {&gain, &bias}); }
};

/// Dense layer on row vectors: x W + b.
template <typename S>
struct LinearParams {
  Parameter<S> weight;
  Parameter<S> bias;

  LinearParams() = default;
  LinearParams(const std::string& name, int in, int out, Engine& rng, double gain = 1.0)
      : weight(normal_param<S>(name + ".weight", in, out, std::sqrt(gain / in), rng)),
        bias(const_param<S>(name + ".bias", 1, out, 0.0)) {}

  Var apply(Graph<S>& g, Var x) { return ops::linear(g, x, g.param(weight), g.param(bias)); }
  void collect(ParamList<S>& out) { out.insert(out.end(), {&weight, &bias}); }
};

/// FNV-1a over names and raw bytes of a parameter set.
template <typename S>
std::uint64_t checksum(const ParamList<S>& params) {
  std::uint64_t h = 1469598103934665603ull;
  for (const Parameter<S>* p : params) {
    h = fnv1a(p->name, h);
    const auto* bytes = reinterpret_cast<const unsigned char*>(p->value.data());
    const std::size_t n = static_cast<std::size_t>(p->value.size()) * sizeof(S);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  }
  return h;
}

template <typename S>
void zero_grads(const ParamList<S>& params) {
  for (Parameter<S>* p : params) p->zero_grad();
}

}  // namespace diffcrn
