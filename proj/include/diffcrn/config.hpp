#pragma once

// Run configuration (JSON document) with validation and a content hash.

#include "diffcrn/classifier.hpp"
#include "diffcrn/data_io.hpp"
#include "diffcrn/rng.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace diffcrn {

struct DataConfig {
  std::string cube_path;    // empty -> synthesise
  std::string labels_path;
  SynthSpec synth;
  std::optional<std::uint64_t> synth_seed;  // defaults to the run seed
  std::string normalize = "minmax";
  int patch = 7;
  std::string split = "count";  // "count" | "fraction"
  int split_count = 20;
  double split_fraction = 0.1;
};

struct DiffusionConfig {
  int T = 50;
  double beta_start = 1e-4;
  double beta_end = 0.02;
};

struct ModelConfig {
  int width = 64;
  int groups = 4;
  int time_dim = 64;
  double layer_scale = 1e-4;
  int d_cls = 64;
  int reduction = 4;
  int norm_groups = 8;
};

struct PretrainConfig {
  int batch = 8;
  int steps = 2000;
  double lr = 1e-3;  // 2000 desk-scale steps; 1e-4 leaves the uncertainty weights near 0
  double tau = 0.5;
  std::string loss = "lae";  // "lae" | "mse" (diffusion term only)
};

struct SelectConfig {
  int k = 5;
  int stride = 0;  // 0 -> max(1, T / 100)
  int probe = 256;
};

struct ClassifyConfig {
  int batch = 64;
  int epochs = 100;
  double lr = 1e-4;
  std::string head = "full";
  std::vector<int> timesteps;  // overrides the ranking when non-empty
  int eval_chunk = 128;
};

struct RunConfig {
  DataConfig data;
  DiffusionConfig diffusion;
  ModelConfig model;
  PretrainConfig pretrain;
  SelectConfig select;
  ClassifyConfig classify;
  std::uint64_t seed = 0;

  std::uint64_t scene_seed() const { return data.synth_seed.value_or(seed); }
};

namespace detail {

template <typename T>
void get_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) {
    try {
      out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(std::string("config: bad value for '") + key + "': " + e.what());
    }
  }
}

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : keys) known = known || it.key() == k;
    if (!known) throw Error("config: unknown key '" + it.key() + "' in " + where);
  }
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json synth = {{"height", c.data.synth.height},
                          {"width", c.data.synth.width},
                          {"bands", c.data.synth.bands},
                          {"classes", c.data.synth.classes},
                          {"noise", c.data.synth.noise}};
  if (c.data.synth_seed) synth["seed"] = *c.data.synth_seed;
  return {
      {"data",
       {{"cube", c.data.cube_path},
        {"labels", c.data.labels_path},
        {"synth", synth},
        {"normalize", c.data.normalize},
        {"patch", c.data.patch},
        {"split", {{"strategy", c.data.split}, {"count", c.data.split_count}, {"fraction", c.data.split_fraction}}}}},
      {"diffusion", {{"T", c.diffusion.T}, {"beta_start", c.diffusion.beta_start}, {"beta_end", c.diffusion.beta_end}}},
      {"model",
       {{"width", c.model.width},
        {"groups", c.model.groups},
        {"time_dim", c.model.time_dim},
        {"layer_scale", c.model.layer_scale},
        {"d_cls", c.model.d_cls},
        {"reduction", c.model.reduction},
        {"norm_groups", c.model.norm_groups}}},
      {"pretrain",
       {{"batch", c.pretrain.batch},
        {"steps", c.pretrain.steps},
        {"lr", c.pretrain.lr},
        {"tau", c.pretrain.tau},
        {"loss", c.pretrain.loss}}},
      {"select", {{"k", c.select.k}, {"stride", c.select.stride}, {"probe", c.select.probe}}},
      {"classify",
       {{"batch", c.classify.batch},
        {"epochs", c.classify.epochs},
        {"lr", c.classify.lr},
        {"head", c.classify.head},
        {"timesteps", c.classify.timesteps},
        {"eval_chunk", c.classify.eval_chunk}}},
      {"seed", c.seed},
  };
}

inline void validate(const RunConfig& c) {
  require(c.data.patch >= 1 && c.data.patch % 2 == 1, "config: data.patch must be a positive odd integer");
  require(c.data.normalize == "minmax" || c.data.normalize == "standardize" || c.data.normalize == "none",
          "config: data.normalize must be minmax, standardize or none");
  require(c.data.split == "count" || c.data.split == "fraction", "config: data.split.strategy must be count or fraction");
  require(c.data.split_count >= 1, "config: data.split.count must be >= 1");
  require(c.data.split_fraction > 0.0 && c.data.split_fraction < 1.0, "config: data.split.fraction must be in (0, 1)");
  require(c.data.cube_path.empty() == c.data.labels_path.empty(), "config: data.cube and data.labels go together");
  require(c.diffusion.T >= 1, "config: diffusion.T must be >= 1");
  require(c.diffusion.beta_start > 0 && c.diffusion.beta_start <= c.diffusion.beta_end && c.diffusion.beta_end < 1,
          "config: need 0 < beta_start <= beta_end < 1");
  require(c.model.width >= 1 && c.model.groups >= 1 && c.model.width % c.model.groups == 0,
          "config: model.groups must divide model.width");
  require(c.model.time_dim >= 2 && c.model.time_dim % 2 == 0, "config: model.time_dim must be even");
  require(c.model.d_cls >= 1 && c.model.reduction >= 1 && c.model.d_cls % c.model.reduction == 0,
          "config: model.reduction must divide model.d_cls");
  require(c.model.norm_groups >= 1 && c.model.d_cls % c.model.norm_groups == 0,
          "config: model.norm_groups must divide model.d_cls");
  require(c.pretrain.batch >= 1 && c.pretrain.steps >= 0 && c.pretrain.lr > 0 && c.pretrain.tau > 0,
          "config: pretrain batch/steps/lr/tau out of range");
  require(c.pretrain.loss == "lae" || c.pretrain.loss == "mse", "config: pretrain.loss must be lae or mse");
  require(c.select.k >= 1 && c.select.probe >= 1, "config: select.k and select.probe must be positive");
  require(c.classify.batch >= 1 && c.classify.epochs >= 0 && c.classify.lr > 0 && c.classify.eval_chunk >= 1,
          "config: classify batch/epochs/lr/eval_chunk out of range");
  parse_head(c.classify.head);
  for (int t : c.classify.timesteps) {
    require(t >= 1 && t <= c.diffusion.T, "config: classify.timesteps entries must lie in [1, T]");
  }
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  detail::reject_unknown(j, {"data", "diffusion", "model", "pretrain", "select", "classify", "seed"}, "top level");
  if (j.contains("data")) {
    const auto& d = j["data"];
    detail::reject_unknown(d, {"cube", "labels", "synth", "normalize", "patch", "split"}, "data");
    detail::get_opt(d, "cube", c.data.cube_path);
    detail::get_opt(d, "labels", c.data.labels_path);
    detail::get_opt(d, "normalize", c.data.normalize);
    detail::get_opt(d, "patch", c.data.patch);
    if (d.contains("synth")) {
      const auto& s = d["synth"];
      detail::reject_unknown(s, {"height", "width", "bands", "classes", "noise", "seed"}, "data.synth");
      detail::get_opt(s, "height", c.data.synth.height);
      detail::get_opt(s, "width", c.data.synth.width);
      detail::get_opt(s, "bands", c.data.synth.bands);
      detail::get_opt(s, "classes", c.data.synth.classes);
      detail::get_opt(s, "noise", c.data.synth.noise);
      if (s.contains("seed") && !s["seed"].is_null()) c.data.synth_seed = s["seed"].get<std::uint64_t>();
    }
    if (d.contains("split")) {
      const auto& s = d["split"];
      detail::reject_unknown(s, {"strategy", "count", "fraction"}, "data.split");
      detail::get_opt(s, "strategy", c.data.split);
      detail::get_opt(s, "count", c.data.split_count);
      detail::get_opt(s, "fraction", c.data.split_fraction);
    }
  }
  if (j.contains("diffusion")) {
    const auto& d = j["diffusion"];
    detail::reject_unknown(d, {"T", "beta_start", "beta_end"}, "diffusion");
    detail::get_opt(d, "T", c.diffusion.T);
    detail::get_opt(d, "beta_start", c.diffusion.beta_start);
    detail::get_opt(d, "beta_end", c.diffusion.beta_end);
  }
  if (j.contains("model")) {
    const auto& m = j["model"];
    detail::reject_unknown(m, {"width", "groups", "time_dim", "layer_scale", "d_cls", "reduction", "norm_groups"}, "model");
    detail::get_opt(m, "width", c.model.width);
    detail::get_opt(m, "groups", c.model.groups);
    detail::get_opt(m, "time_dim", c.model.time_dim);
    detail::get_opt(m, "layer_scale", c.model.layer_scale);
    detail::get_opt(m, "d_cls", c.model.d_cls);
    detail::get_opt(m, "reduction", c.model.reduction);
    detail::get_opt(m, "norm_groups", c.model.norm_groups);
  }
  if (j.contains("pretrain")) {
    const auto& p = j["pretrain"];
    detail::reject_unknown(p, {"batch", "steps", "lr", "tau", "loss"}, "pretrain");
    detail::get_opt(p, "batch", c.pretrain.batch);
    detail::get_opt(p, "steps", c.pretrain.steps);
    detail::get_opt(p, "lr", c.pretrain.lr);
    detail::get_opt(p, "tau", c.pretrain.tau);
    detail::get_opt(p, "loss", c.pretrain.loss);
  }
  if (j.contains("select")) {
    const auto& s = j["select"];
    detail::reject_unknown(s, {"k", "stride", "probe"}, "select");
    detail::get_opt(s, "k", c.select.k);
    detail::get_opt(s, "stride", c.select.stride);
    detail::get_opt(s, "probe", c.select.probe);
  }
  if (j.contains("classify")) {
    const auto& s = j["classify"];
    detail::reject_unknown(s, {"batch", "epochs", "lr", "head", "timesteps", "eval_chunk"}, "classify");
    detail::get_opt(s, "batch", c.classify.batch);
    detail::get_opt(s, "epochs", c.classify.epochs);
    detail::get_opt(s, "lr", c.classify.lr);
    detail::get_opt(s, "head", c.classify.head);
    detail::get_opt(s, "timesteps", c.classify.timesteps);
    detail::get_opt(s, "eval_chunk", c.classify.eval_chunk);
  }
  detail::get_opt(j, "seed", c.seed);
  validate(c);
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "cannot open config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("config " + path + ": " + e.what());
  }
  return config_from_json(j);
}

/// Hash of the sections that fix the data, the schedule, the parameter
/// shapes and the seed; training budgets and selection knobs are excluded so
/// later stages may be re-run with different budgets against one checkpoint.
inline std::string config_hash(const RunConfig& c) {
  const nlohmann::json j = to_json(c);
  nlohmann::json key = {{"data", j["data"]}, {"diffusion", j["diffusion"]}, {"model", j["model"]}, {"seed", j["seed"]}};
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(key.dump())));
  return buf;
}

}  // namespace diffcrn
