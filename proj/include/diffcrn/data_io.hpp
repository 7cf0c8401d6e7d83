#pragma once

// Hyperspectral cubes, label rasters, patch extraction, splits and synthetic
// scenes.

#include "diffcrn/rng.hpp"
#include "diffcrn/tensor.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace diffcrn {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

struct HsiCube {
  int height = 0;
  int width = 0;
  int bands = 0;
  std::vector<float> values;  // row-major H, W, C
  std::vector<double> band_wavelengths;

  HsiCube() = default;
  HsiCube(int h, int w, int c) : height(h), width(w), bands(c), values(static_cast<std::size_t>(h) * w * c, 0.0f) {}

  std::size_t offset(int row, int col, int band = 0) const {
    return (static_cast<std::size_t>(row) * width + col) * bands + band;
  }
  float& at(int row, int col, int band) { return values[offset(row, col, band)]; }
  float at(int row, int col, int band) const { return values[offset(row, col, band)]; }
  int pixels() const { return height * width; }
};

struct LabelRaster {
  static constexpr int kUnlabeled = -1;

  int height = 0;
  int width = 0;
  std::vector<std::int32_t> labels;  // row-major
  std::vector<std::string> class_names;

  LabelRaster() = default;
  LabelRaster(int h, int w, int n_classes)
      : height(h), width(w), labels(static_cast<std::size_t>(h) * w, kUnlabeled) {
    for (int k = 0; k < n_classes; ++k) class_names.push_back("class_" + std::to_string(k));
  }

  int num_classes() const { return static_cast<int>(class_names.size()); }
  std::int32_t at(int row, int col) const { return labels[static_cast<std::size_t>(row) * width + col]; }
  std::int32_t& at(int row, int col) { return labels[static_cast<std::size_t>(row) * width + col]; }
};

struct PixelIndex {
  int row = 0;
  int col = 0;
  bool operator==(const PixelIndex&) const = default;
};

/// A P x P x C neighbourhood stored token-major (P*P rows, C columns).
template <typename S>
struct Instance {
  Mat<S> patch;
  PixelIndex center;
  std::optional<int> label;
};

enum class SplitKind { kFraction, kCount };

struct SplitStrategy {
  SplitKind kind = SplitKind::kCount;
  double fraction = 0.1;
  int count = 20;

  static SplitStrategy per_class_fraction(double f) { return {SplitKind::kFraction, f, 0}; }
  static SplitStrategy per_class_count(int m) { return {SplitKind::kCount, 0.0, m}; }
};

struct SampleSplit {
  std::vector<int> train_indices;  // linear pixel indices row * W + col, ascending
  std::vector<int> test_indices;
  SplitStrategy strategy;
  std::uint64_t seed = 0;
};

struct SynthSpec {
  int height = 48;
  int width = 48;
  int bands = 16;
  int classes = 4;
  double noise = 0.02;
};

// ------------------------------------------------------------------ container

namespace detail {

inline nlohmann::json read_header(std::istream& in, const std::string& path) {
  std::string line;
  if (!std::getline(in, line)) throw Error(path + ": malformed header: missing header line");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw Error(path + ": malformed header: " + e.what());
  }
  for (const char* key : {"magic", "H", "W", "C", "dtype", "order"}) {
    if (!h.contains(key)) throw Error(path + ": malformed header: missing key '" + key + "'");
  }
  if (h["magic"] != "HSC1") throw Error(path + ": malformed header: bad magic");
  if (h["order"] != "HWC") throw Error(path + ": malformed header: unsupported order");
  if (!h["H"].is_number_integer() || !h["W"].is_number_integer() || !h["C"].is_number_integer() ||
      h["H"].get<long long>() < 1 || h["W"].get<long long>() < 1 || h["C"].get<long long>() < 1) {
    throw Error(path + ": malformed header: dimensions must be positive integers");
  }
  return h;
}

inline std::string header_line(int h, int w, int c, const char* dtype) {
  nlohmann::ordered_json j;
  j["magic"] = "HSC1";
  j["H"] = h;
  j["W"] = w;
  j["C"] = c;
  j["dtype"] = dtype;
  j["order"] = "HWC";
  return j.dump() + "\n";
}

inline std::string read_payload(std::istream& in) {
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

inline void save_cube(const HsiCube& cube, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), "cannot open " + path + " for writing");
  out << detail::header_line(cube.height, cube.width, cube.bands, "f32");
  out.write(reinterpret_cast<const char*>(cube.values.data()),
            static_cast<std::streamsize>(cube.values.size() * sizeof(float)));
  require(static_cast<bool>(out), "write failed: " + path);
}

inline HsiCube load_cube(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "cannot open " + path);
  auto h = detail::read_header(in, path);
  if (h["dtype"] != "f32") throw Error(path + ": malformed header: cube dtype must be f32");
  HsiCube cube(h["H"].get<int>(), h["W"].get<int>(), h["C"].get<int>());
  const std::string payload = detail::read_payload(in);
  const std::size_t expected = cube.values.size() * sizeof(float);
  if (payload.size() != expected) {
    throw Error(path + ": payload size mismatch: expected " + std::to_string(expected) + " bytes, got " +
                std::to_string(payload.size()));
  }
  std::memcpy(cube.values.data(), payload.data(), expected);
  for (std::size_t i = 0; i < cube.values.size(); ++i) {
    if (!std::isfinite(cube.values[i])) {
      throw Error(path + ": non-finite value at element offset " + std::to_string(i));
    }
  }
  return cube;
}

inline void save_labels(const LabelRaster& labels, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), "cannot open " + path + " for writing");
  out << detail::header_line(labels.height, labels.width, 1, "i32");
  out.write(reinterpret_cast<const char*>(labels.labels.data()),
            static_cast<std::streamsize>(labels.labels.size() * sizeof(std::int32_t)));
  require(static_cast<bool>(out), "write failed: " + path);
}

/// Loads a label raster; the class count is max label + 1.
inline LabelRaster load_labels(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "cannot open " + path);
  auto h = detail::read_header(in, path);
  if (h["dtype"] != "i32" || h["C"] != 1) throw Error(path + ": malformed header: label raster must be i32 with C=1");
  const int H = h["H"].get<int>();
  const int W = h["W"].get<int>();
  const std::string payload = detail::read_payload(in);
  const std::size_t expected = static_cast<std::size_t>(H) * W * sizeof(std::int32_t);
  if (payload.size() != expected) {
    throw Error(path + ": payload size mismatch: expected " + std::to_string(expected) + " bytes, got " +
                std::to_string(payload.size()));
  }
  LabelRaster r(H, W, 0);
  std::memcpy(r.labels.data(), payload.data(), expected);
  int max_label = -1;
  for (std::size_t i = 0; i < r.labels.size(); ++i) {
    if (r.labels[i] < LabelRaster::kUnlabeled) throw Error(path + ": invalid label at offset " + std::to_string(i));
    max_label = std::max(max_label, static_cast<int>(r.labels[i]));
  }
  for (int k = 0; k <= max_label; ++k) r.class_names.push_back("class_" + std::to_string(k));
  return r;
}

// -------------------------------------------------------------- normalisation

enum class NormalizeMode { kMinMax, kStandardize };

inline HsiCube normalize_cube(HsiCube cube, NormalizeMode mode) {
  require(!cube.values.empty(), "normalize_cube: empty cube");
  if (mode == NormalizeMode::kMinMax) {
    const auto [lo_it, hi_it] = std::minmax_element(cube.values.begin(), cube.values.end());
    const double lo = *lo_it;
    const double hi = *hi_it;
    require(hi > lo, "normalize_cube: constant cube cannot be min-max normalised");
    for (float& v : cube.values) v = static_cast<float>((v - lo) / (hi - lo));
    return cube;
  }
  const int n = cube.pixels();
  for (int c = 0; c < cube.bands; ++c) {
    double mean = 0.0;
    for (int p = 0; p < n; ++p) mean += cube.values[static_cast<std::size_t>(p) * cube.bands + c];
    mean /= n;
    double var = 0.0;
    for (int p = 0; p < n; ++p) {
      const double d = cube.values[static_cast<std::size_t>(p) * cube.bands + c] - mean;
      var += d * d;
    }
    var /= n;
    require(var > 0.0, "normalize_cube: band " + std::to_string(c) + " is constant");
    const double inv = 1.0 / std::sqrt(var);
    for (int p = 0; p < n; ++p) {
      float& v = cube.values[static_cast<std::size_t>(p) * cube.bands + c];
      v = static_cast<float>((v - mean) * inv);
    }
  }
  return cube;
}

// ---------------------------------------------------------------- patches

/// Mirror index without repeating the edge sample (…, 2, 1, 0, 1, 2, …).
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

template <typename S>
Mat<S> extract_patch(const HsiCube& cube, PixelIndex center, int patch) {
  require(patch >= 1 && patch % 2 == 1, "extract_patches: patch size must be odd, got " + std::to_string(patch));
  require(center.row >= 0 && center.row < cube.height && center.col >= 0 && center.col < cube.width,
          "extract_patches: center out of range");
  const int half = patch / 2;
  Mat<S> out(patch * patch, cube.bands);
  for (int i = 0; i < patch; ++i) {
    const int r = reflect_index(center.row + i - half, cube.height);
    for (int j = 0; j < patch; ++j) {
      const int c = reflect_index(center.col + j - half, cube.width);
      const float* src = &cube.values[cube.offset(r, c)];
      for (int b = 0; b < cube.bands; ++b) out(i * patch + j, b) = static_cast<S>(src[b]);
    }
  }
  return out;
}

template <typename S>
std::vector<Instance<S>> extract_patches(const HsiCube& cube, const std::vector<PixelIndex>& centers, int patch,
                                         const LabelRaster* labels = nullptr) {
  std::vector<Instance<S>> out;
  out.reserve(centers.size());
  for (const PixelIndex& c : centers) {
    Instance<S> inst{extract_patch<S>(cube, c, patch), c, std::nullopt};
    if (labels != nullptr && labels->at(c.row, c.col) >= 0) inst.label = labels->at(c.row, c.col);
    out.push_back(std::move(inst));
  }
  return out;
}

/// Stacks instance patches into one token-major batch matrix.
template <typename S>
Mat<S> stack_patches(const std::vector<Instance<S>>& instances, std::size_t begin, std::size_t end) {
  require(begin < end && end <= instances.size(), "stack_patches: bad range");
  const Eigen::Index n = instances[begin].patch.rows();
  Mat<S> out((end - begin) * n, instances[begin].patch.cols());
  for (std::size_t i = begin; i < end; ++i) out.middleRows((i - begin) * n, n) = instances[i].patch;
  return out;
}

inline PixelIndex pixel_of(int linear, int width) { return {linear / width, linear % width}; }

// ------------------------------------------------------------------ splitting

inline SampleSplit split_samples(const LabelRaster& labels, const SplitStrategy& strategy, std::uint64_t seed) {
  const int n_classes = labels.num_classes();
  require(n_classes > 0, "split_samples: raster has no classes");
  std::vector<std::vector<int>> per_class(static_cast<std::size_t>(n_classes));
  for (std::size_t i = 0; i < labels.labels.size(); ++i) {
    const int y = labels.labels[i];
    if (y < 0) continue;
    require(y < n_classes, "split_samples: label " + std::to_string(y) + " outside class range");
    per_class[y].push_back(static_cast<int>(i));
  }
  SampleSplit split;
  split.strategy = strategy;
  split.seed = seed;
  for (int k = 0; k < n_classes; ++k) {
    auto& idx = per_class[k];
    const int size = static_cast<int>(idx.size());
    if (size < 2) throw Error("split_samples: class " + std::to_string(k) + " has too few samples (" + std::to_string(size) + ")");
    int take = 0;
    if (strategy.kind == SplitKind::kFraction) {
      require(strategy.fraction > 0.0 && strategy.fraction < 1.0, "split_samples: fraction must be in (0, 1)");
      take = static_cast<int>(std::floor(strategy.fraction * size + 0.5));
      take = std::max(take, 1);
    } else {
      require(strategy.count >= 1, "split_samples: per-class count must be >= 1");
      take = strategy.count;
    }
    take = std::min(take, size - 1);
    Engine rng = substream(seed, "split", static_cast<std::uint64_t>(k));
    std::shuffle(idx.begin(), idx.end(), rng);
    split.train_indices.insert(split.train_indices.end(), idx.begin(), idx.begin() + take);
    split.test_indices.insert(split.test_indices.end(), idx.begin() + take, idx.end());
  }
  std::sort(split.train_indices.begin(), split.train_indices.end());
  std::sort(split.test_indices.begin(), split.test_indices.end());
  return split;
}

// ----------------------------------------------------------------- synthesis

/// Smooth class endmembers over a Voronoi partition of the scene, plus
/// i.i.d. Gaussian noise of standard deviation `spec.noise`.
inline std::pair<HsiCube, LabelRaster> synth_cube(const SynthSpec& spec, std::uint64_t seed) {
  require(spec.height >= 1 && spec.width >= 1 && spec.bands >= 1 && spec.classes >= 1,
          "synth_cube: dimensions and class count must be positive");
  require(spec.classes <= spec.height * spec.width, "synth_cube: more classes than pixels");
  require(spec.noise >= 0.0, "synth_cube: noise must be non-negative");

  Engine rng = substream(seed, "synth.endmembers");
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  // Shared continuum plus class-specific absorption/reflection features.
  const int C = spec.bands;
  std::vector<std::vector<double>> endmembers(static_cast<std::size_t>(spec.classes), std::vector<double>(C));
  const double tilt = 0.2 * u01(rng);
  for (int k = 0; k < spec.classes; ++k) {
    const double level = 0.3 + 0.4 * u01(rng);
    const double slope = (u01(rng) - 0.5) * 0.3;
    const int n_bumps = 2;
    std::vector<double> centre(n_bumps), width(n_bumps), amp(n_bumps);
    for (int j = 0; j < n_bumps; ++j) {
      centre[j] = u01(rng);
      width[j] = 0.08 + 0.15 * u01(rng);
      amp[j] = (u01(rng) - 0.5) * 0.4;
    }
    for (int c = 0; c < C; ++c) {
      const double x = C == 1 ? 0.0 : static_cast<double>(c) / (C - 1);
      double v = level + slope * (x - 0.5) + tilt * x;
      for (int j = 0; j < n_bumps; ++j) v += amp[j] * std::exp(-0.5 * std::pow((x - centre[j]) / width[j], 2));
      endmembers[k][c] = v;
    }
  }

  // Voronoi seeds: best of several random draws by smallest-cell size.
  const int H = spec.height;
  const int W = spec.width;
  std::vector<int> best_map;
  int best_min = -1;
  Engine seed_rng = substream(seed, "synth.layout");
  for (int attempt = 0; attempt < 32; ++attempt) {
    std::vector<std::pair<double, double>> pts(static_cast<std::size_t>(spec.classes));
    for (auto& p : pts) p = {u01(seed_rng) * H, u01(seed_rng) * W};
    std::vector<int> map(static_cast<std::size_t>(H) * W);
    std::vector<int> sizes(static_cast<std::size_t>(spec.classes), 0);
    for (int r = 0; r < H; ++r) {
      for (int c = 0; c < W; ++c) {
        int arg = 0;
        double best = 1e300;
        for (int k = 0; k < spec.classes; ++k) {
          const double d = std::pow(r + 0.5 - pts[k].first, 2) + std::pow(c + 0.5 - pts[k].second, 2);
          if (d < best) {
            best = d;
            arg = k;
          }
        }
        map[static_cast<std::size_t>(r) * W + c] = arg;
        ++sizes[arg];
      }
    }
    const int mn = *std::min_element(sizes.begin(), sizes.end());
    if (mn > best_min) {
      best_min = mn;
      best_map = std::move(map);
    }
  }

  HsiCube cube(H, W, C);
  LabelRaster labels(H, W, spec.classes);
  Engine noise_rng = substream(seed, "synth.noise");
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int p = 0; p < H * W; ++p) {
    const int k = best_map[p];
    labels.labels[p] = k;
    for (int c = 0; c < C; ++c) {
      const double n = spec.noise > 0.0 ? spec.noise * nd(noise_rng) : 0.0;
      cube.values[static_cast<std::size_t>(p) * C + c] = static_cast<float>(endmembers[k][c] + n);
    }
  }
  return {std::move(cube), std::move(labels)};
}

}  // namespace diffcrn
