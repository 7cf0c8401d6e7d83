#pragma once

#include "diffcrn/tensor.hpp"

#include <cstdint>
#include <random>
#include <string_view>

namespace diffcrn {

using Engine = std::mt19937_64;

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ull) {
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Independent generator for a named component. All randomness in a run is
/// derived from the root seed this way, so adding a consumer never shifts the
/// draws of another.
inline Engine substream(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0) {
  return Engine(splitmix64(splitmix64(seed ^ fnv1a(tag)) + index));
}

/// Standard-normal matrix. Draws are made in double and cast so float and
/// double builds see the same sequence.
template <typename S>
Mat<S> gaussian(Eigen::Index rows, Eigen::Index cols, Engine& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Mat<S> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(nd(rng));
  return m;
}

template <typename S>
Mat<S> uniform(Eigen::Index rows, Eigen::Index cols, double lo, double hi, Engine& rng) {
  std::uniform_real_distribution<double> ud(lo, hi);
  Mat<S> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(ud(rng));
  return m;
}

}  // namespace diffcrn
