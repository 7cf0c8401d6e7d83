#pragma once

// Confusion matrices and accuracy / agreement / IoU metrics.

#include "diffcrn/tensor.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace diffcrn {

/// counts[i][j] = number of pixels of true class i predicted as class j.
struct ConfusionMatrix {
  int classes = 0;
  std::vector<std::int64_t> counts;  // row-major K x K

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int k) : classes(k), counts(static_cast<std::size_t>(k) * k, 0) {}

  std::int64_t& at(int i, int j) { return counts[static_cast<std::size_t>(i) * classes + j]; }
  std::int64_t at(int i, int j) const { return counts[static_cast<std::size_t>(i) * classes + j]; }

  std::int64_t total() const {
    std::int64_t s = 0;
    for (auto c : counts) s += c;
    return s;
  }
  std::int64_t row_sum(int i) const {
    std::int64_t s = 0;
    for (int j = 0; j < classes; ++j) s += at(i, j);
    return s;
  }
  std::int64_t col_sum(int j) const {
    std::int64_t s = 0;
    for (int i = 0; i < classes; ++i) s += at(i, j);
    return s;
  }
};

inline ConfusionMatrix build_confusion(const std::vector<int>& y_true, const std::vector<int>& y_pred, int classes) {
  require(classes >= 1, "build_confusion: need at least one class");
  require(y_true.size() == y_pred.size(), "build_confusion: label vectors differ in length");
  ConfusionMatrix m(classes);
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    require(y_true[i] >= 0 && y_true[i] < classes && y_pred[i] >= 0 && y_pred[i] < classes,
            "build_confusion: label out of range at position " + std::to_string(i));
    ++m.at(y_true[i], y_pred[i]);
  }
  return m;
}

struct Metrics {
  double oa = 0.0;
  double aa = 0.0;
  double kappa = 0.0;
  double fwiou = 0.0;
  double miou = 0.0;
  std::vector<double> per_class;  // NaN for classes absent from the ground truth
  std::vector<double> iou;        // NaN for classes absent from both truth and prediction
};

inline Metrics compute_metrics(const ConfusionMatrix& conf) {
  const std::int64_t total = conf.total();
  require(total > 0, "compute_metrics: empty confusion matrix");
  const double n = static_cast<double>(total);
  const int K = conf.classes;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  Metrics m;
  m.per_class.assign(K, nan);
  m.iou.assign(K, nan);
  double trace = 0.0, pe = 0.0, aa_sum = 0.0, iou_sum = 0.0;
  int aa_count = 0, iou_count = 0;
  for (int i = 0; i < K; ++i) {
    const double nii = static_cast<double>(conf.at(i, i));
    const double row = static_cast<double>(conf.row_sum(i));
    const double col = static_cast<double>(conf.col_sum(i));
    trace += nii;
    pe += row * col;
    if (row > 0) {
      m.per_class[i] = nii / row;
      aa_sum += m.per_class[i];
      ++aa_count;
    }
    const double uni = row + col - nii;
    if (uni > 0) {
      m.iou[i] = nii / uni;
      iou_sum += m.iou[i];
      ++iou_count;
      m.fwiou += row / n * m.iou[i];
    }
  }
  m.oa = trace / n;
  m.aa = aa_sum / aa_count;
  pe /= n * n;
  m.kappa = pe < 1.0 ? (m.oa - pe) / (1.0 - pe) : 1.0;
  m.miou = iou_sum / iou_count;
  return m;
}

/// Flat name -> value view used for aggregation and machine-readable output.
inline std::map<std::string, double> metric_dict(const Metrics& m, const std::vector<std::string>& class_names = {}) {
  std::map<std::string, double> d{{"OA", m.oa}, {"AA", m.aa}, {"kappa", m.kappa}, {"FWIoU", m.fwiou}, {"MIoU", m.miou}};
  for (std::size_t i = 0; i < m.per_class.size(); ++i) {
    const std::string name = i < class_names.size() ? class_names[i] : "class_" + std::to_string(i);
    d["acc." + name] = m.per_class[i];
  }
  return d;
}

struct MeanStd {
  double mean = 0.0;
  double stddev = 0.0;
};

/// Per-metric sample mean and (n-1)-denominator standard deviation (0 for one run).
inline std::map<std::string, MeanStd> aggregate_runs(const std::vector<std::map<std::string, double>>& runs) {
  require(!runs.empty(), "aggregate_runs: no runs");
  std::map<std::string, MeanStd> out;
  for (const auto& [key, _] : runs.front()) out[key] = {};
  for (const auto& r : runs) {
    require(r.size() == out.size(), "aggregate_runs: inconsistent metric keys");
    for (const auto& [key, v] : r) {
      auto it = out.find(key);
      require(it != out.end(), "aggregate_runs: inconsistent metric keys ('" + key + "')");
      it->second.mean += v - runs.front().at(key);
    }
  }
  // Offsets from the first run keep identical runs exactly identical to their mean.
  const double n = static_cast<double>(runs.size());
  for (auto& [key, ms] : out) {
    ms.mean = runs.front().at(key) + ms.mean / n;
    if (runs.size() >= 2) {
      double ss = 0.0;
      for (const auto& r : runs) ss += std::pow(r.at(key) - ms.mean, 2);
      ms.stddev = std::sqrt(ss / (n - 1.0));
    }
  }
  return out;
}

/// Percent with two decimals, "99.33±0.16" when a spread is given.
inline std::string format_percent(double value, std::optional<double> spread = std::nullopt) {
  char buf[64];
  if (std::isnan(value)) return "n/a";
  if (spread) {
    std::snprintf(buf, sizeof(buf), "%.2f±%.2f", 100.0 * value, 100.0 * *spread);
  } else {
    std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * value);
  }
  return buf;
}

/// Aligned text table: one row per class, then AA, OA, kappa, FWIoU, MIoU.
inline std::string format_metric_table(const std::map<std::string, MeanStd>& agg,
                                       const std::vector<std::string>& class_names, bool with_spread) {
  std::size_t w = 8;
  for (const auto& n : class_names) w = std::max(w, n.size());
  std::string out;
  auto row = [&](const std::string& name, const std::string& key) {
    const auto it = agg.find(key);
    require(it != agg.end(), "format_metric_table: missing metric '" + key + "'");
    std::string v = with_spread ? format_percent(it->second.mean, it->second.stddev) : format_percent(it->second.mean);
    out += name + std::string(w + 2 - name.size(), ' ') + v + "\n";
  };
  out += "metric" + std::string(w + 2 - 6, ' ') + "value(%)\n";
  for (const auto& n : class_names) row(n, "acc." + n);
  row("AA", "AA");
  row("OA", "OA");
  row("kappa", "kappa");
  row("FWIoU", "FWIoU");
  row("MIoU", "MIoU");
  return out;
}

inline nlohmann::json metrics_json(const std::map<std::string, MeanStd>& agg) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : agg) {
    j[k] = {{"mean", std::isnan(v.mean) ? nlohmann::json(nullptr) : nlohmann::json(v.mean)},
            {"std", std::isnan(v.stddev) ? nlohmann::json(nullptr) : nlohmann::json(v.stddev)}};
  }
  return j;
}

}  // namespace diffcrn
