#include "diffcrn/data_io.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <queue>
#include <set>

using namespace diffcrn;

namespace {

std::string temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("diffcrn_data_io_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

void write_raw(const std::string& path, const std::string& header, std::size_t payload_bytes) {
  std::ofstream out(path, std::ios::binary);
  out << header << "\n";
  std::string payload(payload_bytes, '\0');
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
}

HsiCube random_cube(int h, int w, int c, std::uint64_t seed) {
  HsiCube cube(h, w, c);
  Engine rng(seed);
  std::uniform_real_distribution<float> u(-3.0f, 5.0f);
  for (float& v : cube.values) v = u(rng);
  return cube;
}

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(CubeContainer, HeaderWithExactPayloadLoads) {
  const std::string path = temp_path("ok.hsc");
  write_raw(path, R"({"magic":"HSC1","H":2,"W":2,"C":3,"dtype":"f32","order":"HWC"})", 48);
  const HsiCube cube = load_cube(path);
  EXPECT_EQ(cube.height, 2);
  EXPECT_EQ(cube.width, 2);
  EXPECT_EQ(cube.bands, 3);
  EXPECT_EQ(cube.values.size(), 12u);
}

TEST(CubeContainer, ShortPayloadIsSizeMismatch) {
  const std::string path = temp_path("short.hsc");
  write_raw(path, R"({"magic":"HSC1","H":2,"W":2,"C":3,"dtype":"f32","order":"HWC"})", 47);
  EXPECT_NE(error_of([&] { load_cube(path); }).find("payload size mismatch"), std::string::npos);
}

TEST(CubeContainer, MalformedHeadersAreRejected) {
  const std::string path = temp_path("bad.hsc");
  for (const char* header : {"not json", R"({"magic":"XXXX","H":2,"W":2,"C":3,"dtype":"f32","order":"HWC"})",
                             R"({"magic":"HSC1","H":2,"C":3,"dtype":"f32","order":"HWC"})",
                             R"({"magic":"HSC1","H":0,"W":2,"C":3,"dtype":"f32","order":"HWC"})"}) {
    write_raw(path, header, 48);
    EXPECT_NE(error_of([&] { load_cube(path); }).find("malformed header"), std::string::npos) << header;
  }
}

TEST(CubeContainer, NonFiniteValueNamesOffset) {
  HsiCube cube = random_cube(2, 3, 2, 1);
  cube.values[7] = std::numeric_limits<float>::quiet_NaN();
  const std::string path = temp_path("nan.hsc");
  save_cube(cube, path);
  EXPECT_NE(error_of([&] { load_cube(path); }).find("offset 7"), std::string::npos);
}

TEST(CubeContainer, RoundTripIsBitIdentical) {
  const HsiCube cube = random_cube(5, 4, 6, 42);
  const std::string path = temp_path("rt.hsc");
  save_cube(cube, path);
  const HsiCube back = load_cube(path);
  ASSERT_EQ(back.values.size(), cube.values.size());
  EXPECT_EQ(std::memcmp(back.values.data(), cube.values.data(), cube.values.size() * sizeof(float)), 0);
  EXPECT_EQ(std::filesystem::file_size(path),
            std::string(R"({"magic":"HSC1","H":5,"W":4,"C":6,"dtype":"f32","order":"HWC"})").size() + 1 + 5 * 4 * 6 * 4);
}

TEST(LabelContainer, RoundTripKeepsLabelsAndClassCount) {
  LabelRaster r(3, 4, 3);
  for (std::size_t i = 0; i < r.labels.size(); ++i) r.labels[i] = static_cast<int>(i % 4) - 1;
  const std::string path = temp_path("labels.hsc");
  save_labels(r, path);
  const LabelRaster back = load_labels(path);
  EXPECT_EQ(back.labels, r.labels);
  EXPECT_EQ(back.num_classes(), 3);
}

TEST(Normalize, MinMaxTwoValues) {
  HsiCube cube(1, 2, 1);
  cube.values = {2.0f, 4.0f};
  const HsiCube n = normalize_cube(cube, NormalizeMode::kMinMax);
  EXPECT_EQ(n.values[0], 0.0f);
  EXPECT_EQ(n.values[1], 1.0f);
}

TEST(Normalize, MinMaxUnitCubeIsUnchanged) {
  HsiCube cube = random_cube(3, 3, 2, 5);
  for (float& v : cube.values) v = (v + 3.0f) / 8.0f;
  cube.values[0] = 0.0f;
  cube.values[1] = 1.0f;
  const HsiCube n = normalize_cube(cube, NormalizeMode::kMinMax);
  for (std::size_t i = 0; i < cube.values.size(); ++i) EXPECT_EQ(n.values[i], cube.values[i]);
}

TEST(Normalize, MinMaxIsIdempotentAndBounded) {
  const HsiCube once = normalize_cube(random_cube(6, 5, 4, 9), NormalizeMode::kMinMax);
  const HsiCube twice = normalize_cube(once, NormalizeMode::kMinMax);
  for (std::size_t i = 0; i < once.values.size(); ++i) {
    EXPECT_GE(once.values[i], 0.0f);
    EXPECT_LE(once.values[i], 1.0f);
    EXPECT_NEAR(once.values[i], twice.values[i], 1e-12);
  }
}

TEST(Normalize, StandardizeBandHasZeroMeanUnitStd) {
  HsiCube cube(1, 3, 1);
  cube.values = {1.0f, 2.0f, 3.0f};
  const HsiCube n = normalize_cube(cube, NormalizeMode::kStandardize);
  double mean = 0, sq = 0;
  for (float v : n.values) mean += v;
  mean /= 3;
  for (float v : n.values) sq += (v - mean) * (v - mean);
  EXPECT_NEAR(mean, 0.0, 1e-7);
  EXPECT_NEAR(std::sqrt(sq / 3), 1.0, 1e-6);
  // Reference values are ±sqrt(3/2), 0.
  EXPECT_NEAR(n.values[0], -std::sqrt(1.5), 1e-6);
  EXPECT_NEAR(n.values[2], std::sqrt(1.5), 1e-6);
}

TEST(Normalize, ConstantInputsAreErrors) {
  HsiCube cube(2, 2, 2);
  EXPECT_THROW(normalize_cube(cube, NormalizeMode::kMinMax), Error);
  cube.values = {1, 5, 1, 6, 1, 7, 1, 8};
  EXPECT_THROW(normalize_cube(cube, NormalizeMode::kStandardize), Error);
}

TEST(Patches, SinglePixelWindowIsSpectrum) {
  const HsiCube cube = random_cube(4, 5, 3, 2);
  const Mat<double> p = extract_patch<double>(cube, {2, 3}, 1);
  ASSERT_EQ(p.rows(), 1);
  for (int b = 0; b < 3; ++b) EXPECT_EQ(p(0, b), cube.at(2, 3, b));
}

TEST(Patches, CornerMatchesExplicitReflectPadding) {
  const HsiCube cube = random_cube(4, 4, 2, 3);
  // Oracle: build the reflect-padded array explicitly (pad 1: index -1 -> 1).
  const int pad = 1;
  std::vector<std::vector<std::vector<float>>> padded(6, std::vector<std::vector<float>>(6, std::vector<float>(2)));
  for (int r = -pad; r < 4 + pad; ++r) {
    for (int c = -pad; c < 4 + pad; ++c) {
      const int rr = r < 0 ? -r : (r > 3 ? 6 - r : r);
      const int cc = c < 0 ? -c : (c > 3 ? 6 - c : c);
      for (int b = 0; b < 2; ++b) padded[r + pad][c + pad][b] = cube.at(rr, cc, b);
    }
  }
  const Mat<double> p = extract_patch<double>(cube, {0, 0}, 3);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      for (int b = 0; b < 2; ++b) EXPECT_EQ(p(i * 3 + j, b), padded[i][j][b]);
    }
  }
  EXPECT_EQ(p(4, 0), cube.at(0, 0, 0));
}

TEST(Patches, PatchSevenOnLargeCubeHasExpectedShape) {
  HsiCube cube(145, 145, 200);
  const auto inst = extract_patches<float>(cube, {{72, 72}, {0, 144}}, 7);
  ASSERT_EQ(inst.size(), 2u);
  EXPECT_EQ(inst[0].patch.rows(), 49);
  EXPECT_EQ(inst[0].patch.cols(), 200);
}

TEST(Patches, CenterSpectrumReproducedForEveryPixel) {
  const HsiCube cube = random_cube(8, 8, 5, 11);
  for (int r = 0; r < 8; ++r) {
    for (int c = 0; c < 8; ++c) {
      for (int P : {1, 3, 5, 7}) {
        const Mat<float> p = extract_patch<float>(cube, {r, c}, P);
        const int mid = (P / 2) * P + P / 2;
        for (int b = 0; b < 5; ++b) ASSERT_EQ(p(mid, b), cube.at(r, c, b));
      }
    }
  }
}

TEST(Patches, EvenSizeAndBadCenterAreErrors) {
  const HsiCube cube = random_cube(4, 4, 2, 3);
  EXPECT_THROW(extract_patch<float>(cube, {1, 1}, 4), Error);
  EXPECT_THROW(extract_patch<float>(cube, {4, 0}, 3), Error);
  EXPECT_THROW(extract_patch<float>(cube, {0, -1}, 3), Error);
}

TEST(Patches, LabelsAttachedWhenPresent) {
  const HsiCube cube = random_cube(2, 2, 1, 3);
  LabelRaster r(2, 2, 2);
  r.labels = {0, -1, 1, 1};
  const auto inst = extract_patches<float>(cube, {{0, 0}, {0, 1}, {1, 0}}, 1, &r);
  EXPECT_EQ(inst[0].label, 0);
  EXPECT_FALSE(inst[1].label.has_value());
  EXPECT_EQ(inst[2].label, 1);
}

namespace {

LabelRaster raster_with_sizes(const std::vector<int>& sizes) {
  int total = 0;
  for (int s : sizes) total += s;
  LabelRaster r(1, total + 3, static_cast<int>(sizes.size()));
  int pos = 3;  // a few unlabelled pixels first
  for (std::size_t k = 0; k < sizes.size(); ++k) {
    for (int i = 0; i < sizes[k]; ++i) r.labels[pos++] = static_cast<int>(k);
  }
  return r;
}

std::vector<int> train_counts(const LabelRaster& r, const SampleSplit& s) {
  std::vector<int> counts(r.num_classes(), 0);
  for (int i : s.train_indices) ++counts[r.labels[i]];
  return counts;
}

}  // namespace

TEST(Split, FractionRoundsPerClass) {
  const LabelRaster r = raster_with_sizes({100, 50});
  const SampleSplit s = split_samples(r, SplitStrategy::per_class_fraction(0.1), 1);
  EXPECT_EQ(train_counts(r, s), (std::vector<int>{10, 5}));
}

TEST(Split, FractionRoundsHalfUpWithMinimumOne) {
  const LabelRaster r = raster_with_sizes({25, 2, 35});
  const SampleSplit s = split_samples(r, SplitStrategy::per_class_fraction(0.1), 1);
  EXPECT_EQ(train_counts(r, s), (std::vector<int>{3, 1, 4}));
}

TEST(Split, CountPerClass) {
  const LabelRaster r = raster_with_sizes({46, 1428});
  const SampleSplit s = split_samples(r, SplitStrategy::per_class_count(20), 1);
  EXPECT_EQ(train_counts(r, s), (std::vector<int>{20, 20}));
}

TEST(Split, CountCapsAtClassSizeMinusOne) {
  const LabelRaster r = raster_with_sizes({5, 30});
  const SampleSplit s = split_samples(r, SplitStrategy::per_class_count(20), 1);
  EXPECT_EQ(train_counts(r, s), (std::vector<int>{4, 20}));
}

TEST(Split, ClassWithOneSampleIsError) {
  const LabelRaster r = raster_with_sizes({1, 30});
  EXPECT_THROW(split_samples(r, SplitStrategy::per_class_count(1), 1), Error);
}

TEST(Split, DeterministicAndSeedSensitive) {
  const LabelRaster r = raster_with_sizes({40, 30, 20});
  const SampleSplit a = split_samples(r, SplitStrategy::per_class_count(5), 7);
  const SampleSplit b = split_samples(r, SplitStrategy::per_class_count(5), 7);
  const SampleSplit c = split_samples(r, SplitStrategy::per_class_count(5), 8);
  EXPECT_EQ(a.train_indices, b.train_indices);
  EXPECT_EQ(a.test_indices, b.test_indices);
  EXPECT_NE(a.train_indices, c.train_indices);
}

TEST(Split, PartitionsLabelledPixelsForManySeeds) {
  const LabelRaster r = raster_with_sizes({17, 9, 31, 2});
  std::set<int> labelled;
  for (std::size_t i = 0; i < r.labels.size(); ++i) {
    if (r.labels[i] >= 0) labelled.insert(static_cast<int>(i));
  }
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const SampleSplit s = split_samples(r, SplitStrategy::per_class_fraction(0.3), seed);
    std::set<int> train(s.train_indices.begin(), s.train_indices.end());
    std::set<int> test(s.test_indices.begin(), s.test_indices.end());
    ASSERT_EQ(train.size() + test.size(), labelled.size());
    std::set<int> both = train;
    both.insert(test.begin(), test.end());
    ASSERT_EQ(both, labelled);
  }
}

TEST(Synth, NoiselessClassesShareOneSpectrum) {
  SynthSpec spec{20, 20, 8, 3, 0.0};
  const auto [cube, labels] = synth_cube(spec, 4);
  std::vector<int> first(3, -1);
  for (int p = 0; p < cube.pixels(); ++p) {
    const int k = labels.labels[p];
    if (first[k] < 0) {
      first[k] = p;
      continue;
    }
    for (int b = 0; b < 8; ++b) {
      ASSERT_EQ(cube.values[static_cast<std::size_t>(p) * 8 + b], cube.values[static_cast<std::size_t>(first[k]) * 8 + b]);
    }
  }
}

TEST(Synth, FixedSeedIsBitIdentical) {
  const SynthSpec spec{};
  const auto a = synth_cube(spec, 123);
  const auto b = synth_cube(spec, 123);
  EXPECT_EQ(a.first.values, b.first.values);
  EXPECT_EQ(a.second.labels, b.second.labels);
}

TEST(Synth, DefaultSpecGivesContiguousFullyLabelledRegions) {
  const SynthSpec spec{48, 48, 16, 4, 0.02};
  const auto [cube, labels] = synth_cube(spec, 0);
  EXPECT_EQ(cube.height, 48);
  EXPECT_EQ(cube.width, 48);
  EXPECT_EQ(cube.bands, 16);
  EXPECT_EQ(labels.num_classes(), 4);
  // Flood fill: each class must form exactly one 4-connected component.
  std::vector<int> comp(labels.labels.size(), -1);
  std::vector<int> components_per_class(4, 0);
  for (int start = 0; start < 48 * 48; ++start) {
    ASSERT_GE(labels.labels[start], 0);
    if (comp[start] >= 0) continue;
    const int k = labels.labels[start];
    ++components_per_class[k];
    std::queue<int> q;
    q.push(start);
    comp[start] = start;
    while (!q.empty()) {
      const int p = q.front();
      q.pop();
      const int r = p / 48, c = p % 48;
      const int nbr[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
      for (const auto& n : nbr) {
        if (n[0] < 0 || n[0] >= 48 || n[1] < 0 || n[1] >= 48) continue;
        const int np = n[0] * 48 + n[1];
        if (comp[np] < 0 && labels.labels[np] == k) {
          comp[np] = start;
          q.push(np);
        }
      }
    }
  }
  EXPECT_EQ(components_per_class, (std::vector<int>{1, 1, 1, 1}));
}

TEST(Synth, DegenerateSpecIsError) {
  EXPECT_THROW(synth_cube(SynthSpec{0, 4, 4, 2, 0.0}, 1), Error);
  EXPECT_THROW(synth_cube(SynthSpec{4, 4, 0, 2, 0.0}, 1), Error);
}
