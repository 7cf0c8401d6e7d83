// Command-line front end: synth, pretrain, rank-timesteps, train-classifier,
// evaluate, predict-map.

#include "diffcrn/pipeline.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <iostream>
#include <limits>
#include <optional>

namespace {

using namespace diffcrn;
using S = float;

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
};

RunConfig resolve_config(const Globals& g) {
  RunConfig cfg = g.config_path.empty() ? RunConfig{} : load_config(g.config_path);
  if (g.seed) cfg.seed = *g.seed;
  validate(cfg);
  return cfg;
}

void log_line(const std::string& msg) { std::cerr << "[diffcrn] " << msg << "\n"; }

int cmd_synth(const Globals& g) {
  const RunConfig cfg = resolve_config(g);
  DirLock lock(g.out);
  auto [cube, labels] = synth_cube(cfg.data.synth, cfg.scene_seed());
  save_cube(cube, path_in(g.out, files::kCube));
  save_labels(labels, path_in(g.out, files::kLabels));
  log_line("wrote " + path_in(g.out, files::kCube) + " and " + path_in(g.out, files::kLabels));
  return 0;
}

int cmd_pretrain(const Globals& g) {
  const RunConfig cfg = resolve_config(g);
  DirLock lock(g.out);
  const Scene scene = load_scene(cfg);
  auto model = std::make_unique<PretrainModel<S>>(cfg, scene.cube.bands);
  Adam<S> opt(model->parameters(), cfg.pretrain.lr);
  std::ofstream log(path_in(g.out, files::kPretrainLog), std::ios::binary);
  require(static_cast<bool>(log), "cannot open pretrain log");
  log << kPretrainLogHeader;
  const auto t0 = std::chrono::steady_clock::now();
  const auto records = pretrain(*model, opt, scene.cube, cfg, &log);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  save_checkpoint(pretrain_checkpoint(*model, opt, cfg), path_in(g.out, files::kPretrainCkpt));
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%zu steps in %.1f s; w_diff %.4f, w_rec %.4f", records.size(), secs,
                static_cast<double>(model->weights.diff()), static_cast<double>(model->weights.rec()));
  log_line(buf);
  return 0;
}

int cmd_rank(const Globals& g) {
  const RunConfig cfg = resolve_config(g);
  DirLock lock(g.out);
  const Scene scene = load_scene(cfg);
  auto model = load_pretrained<S>(load_checkpoint(path_in(g.out, files::kPretrainCkpt)), cfg, scene.cube.bands);
  const TimestepRanking ranking = rank_with_denoiser(model->denoiser, scene.cube, cfg);
  write_text(path_in(g.out, files::kRanking), format_ranking(ranking));
  std::string sel;
  for (int t : ranking.selected) sel += " " + std::to_string(t);
  log_line("selected timesteps:" + sel);
  return 0;
}

std::vector<int> classifier_timesteps(const RunConfig& cfg, const std::string& out) {
  if (!cfg.classify.timesteps.empty()) return cfg.classify.timesteps;
  TimestepRanking r = parse_ranking(read_text(path_in(out, files::kRanking)));
  require(static_cast<int>(r.selected.size()) == cfg.select.k,
          "ranking selects " + std::to_string(r.selected.size()) + " timesteps, config expects " +
              std::to_string(cfg.select.k));
  std::sort(r.selected.begin(), r.selected.end());
  return r.selected;
}

int cmd_train_classifier(const Globals& g, const std::string& head_override) {
  RunConfig cfg = resolve_config(g);
  if (!head_override.empty()) cfg.classify.head = head_override;
  DirLock lock(g.out);
  const Scene scene = load_scene(cfg);
  const SampleSplit split = make_split(cfg, scene);
  const HeadKind head = parse_head(cfg.classify.head);
  auto model = load_pretrained<S>(load_checkpoint(path_in(g.out, files::kPretrainCkpt)), cfg, scene.cube.bands);
  const std::vector<int> ts = head == HeadKind::kRaw ? std::vector<int>{} : classifier_timesteps(cfg, g.out);
  Classifier<S> clf(classifier_config(cfg, scene.cube.bands, scene.labels.num_classes(), head), cfg.seed);
  Adam<S> opt(clf.parameters(), cfg.classify.lr);
  std::ofstream log(path_in(g.out, files::kClassifierLog), std::ios::binary);
  require(static_cast<bool>(log), "cannot open classifier log");
  log << kClassifierLogHeader;
  const auto records = train_classifier(model->denoiser, clf, opt, scene, split.train_indices, ts, cfg, &log);
  save_checkpoint(classifier_checkpoint(clf, opt, ts, cfg), path_in(g.out, files::kClassifierCkpt));
  if (!records.empty()) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%s head, %zu epochs, final train accuracy %.4f", head_name(head), records.size(),
                  records.back().train_accuracy);
    log_line(buf);
  }
  return 0;
}

struct Trained {
  std::unique_ptr<PretrainModel<S>> model;
  std::unique_ptr<Classifier<S>> clf;
  std::vector<int> ts;
};

Trained load_trained(const RunConfig& cfg, const std::string& out, int bands) {
  const std::string pre = path_in(out, files::kPretrainCkpt);
  const std::string cls = path_in(out, files::kClassifierCkpt);
  require(std::filesystem::exists(pre), "missing checkpoint " + pre);
  require(std::filesystem::exists(cls), "missing checkpoint " + cls);
  Trained t;
  t.model = load_pretrained<S>(load_checkpoint(pre), cfg, bands);
  const Checkpoint ck = load_checkpoint(cls);
  t.clf = load_classifier<S>(ck, cfg, bands);
  t.ts = checkpoint_timesteps(ck);
  return t;
}

nlohmann::json nan_to_null(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }

int cmd_aggregate(const std::vector<std::string>& inputs) {
  std::vector<std::map<std::string, double>> runs;
  std::vector<std::string> class_names;
  for (const std::string& path : inputs) {
    const nlohmann::json j = nlohmann::json::parse(read_text(path));
    std::map<std::string, double> r;
    for (auto it = j.at("values").begin(); it != j.at("values").end(); ++it) {
      r[it.key()] = it.value().is_null() ? std::numeric_limits<double>::quiet_NaN() : it.value().get<double>();
    }
    runs.push_back(std::move(r));
    class_names = j.at("class_names").get<std::vector<std::string>>();
  }
  const auto agg = aggregate_runs(runs);
  std::cout << "runs " << runs.size() << "\n" << format_metric_table(agg, class_names, true);
  return 0;
}

int cmd_evaluate(const Globals& g) {
  const RunConfig cfg = resolve_config(g);
  DirLock lock(g.out);
  const Scene scene = load_scene(cfg);
  const SampleSplit split = make_split(cfg, scene);
  Trained t = load_trained(cfg, g.out, scene.cube.bands);
  const std::vector<int> pred =
      predict_pixels(t.model->denoiser, *t.clf, scene.cube, split.test_indices, t.ts, cfg);
  const Evaluation ev = evaluate_predictions(scene.labels, split.test_indices, pred);
  const std::string hash = config_hash(cfg);
  const std::string report = format_report(ev, scene.labels.class_names, hash);
  write_text(path_in(g.out, files::kMetricsText), report);
  nlohmann::json j;
  j["config_hash"] = hash;
  j["class_names"] = scene.labels.class_names;
  j["values"] = nlohmann::json::object();
  for (const auto& [k, v] : metric_dict(ev.metrics, scene.labels.class_names)) j["values"][k] = nan_to_null(v);
  std::vector<std::vector<std::int64_t>> conf(ev.confusion.classes);
  for (int i = 0; i < ev.confusion.classes; ++i) {
    for (int k = 0; k < ev.confusion.classes; ++k) conf[i].push_back(ev.confusion.at(i, k));
  }
  j["confusion"] = conf;
  write_text(path_in(g.out, files::kMetricsJson), j.dump(2) + "\n");
  std::cout << report;
  return 0;
}

int cmd_predict_map(const Globals& g, bool mask) {
  const RunConfig cfg = resolve_config(g);
  DirLock lock(g.out);
  const Scene scene = load_scene(cfg);
  Trained t = load_trained(cfg, g.out, scene.cube.bands);
  const LabelRaster map = predict_map(t.model->denoiser, *t.clf, scene, t.ts, cfg, mask);
  save_labels(map, path_in(g.out, files::kMapRaster));
  write_text(path_in(g.out, files::kMapImage), render_ppm(map, t.clf->config().classes));
  log_line("wrote " + path_in(g.out, files::kMapRaster) + " and " + path_in(g.out, files::kMapImage));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diffusion-feature hyperspectral classification"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "RunConfig JSON file");
  app.add_option("--seed", g.seed, "Override the root seed");
  app.add_option("--out", g.out, "Run directory")->capture_default_str();

  auto* synth = app.add_subcommand("synth", "Write a synthetic cube and label raster");
  auto* pre = app.add_subcommand("pretrain", "Train the denoiser and contrastive encoder");
  auto* rank = app.add_subcommand("rank-timesteps", "Rank timesteps by mean spectral angle");
  auto* train = app.add_subcommand("train-classifier", "Train the classifier on the frozen denoiser");
  std::string head;
  train->add_option("--head", head, "Override classify.head (full, linear, raw)");
  auto* eval = app.add_subcommand("evaluate", "Score the test split, or aggregate metric files");
  std::vector<std::string> aggregate;
  eval->add_option("--aggregate", aggregate, "metrics.json files to combine as mean±std");
  auto* map = app.add_subcommand("predict-map", "Classify every pixel and write a raster and P6 image");
  bool mask = false;
  map->add_flag("--mask-unlabeled", mask, "Draw pixels without ground truth in black");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*synth) return cmd_synth(g);
    if (*pre) return cmd_pretrain(g);
    if (*rank) return cmd_rank(g);
    if (*train) return cmd_train_classifier(g, head);
    if (*eval) return aggregate.empty() ? cmd_evaluate(g) : cmd_aggregate(aggregate);
    if (*map) return cmd_predict_map(g, mask);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
