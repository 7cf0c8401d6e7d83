#pragma once

// The two training stages, timestep ranking, evaluation and map output,
// wired to a RunConfig and an output directory.

#include "diffcrn/checkpoint.hpp"
#include "diffcrn/classifier.hpp"
#include "diffcrn/config.hpp"
#include "diffcrn/data_io.hpp"
#include "diffcrn/diffusion.hpp"
#include "diffcrn/evaluation.hpp"
#include "diffcrn/objectives.hpp"
#include "diffcrn/optim.hpp"
#include "diffcrn/timestep_select.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <array>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace diffcrn {

// ------------------------------------------------------------------- files

namespace files {
inline constexpr const char* kCube = "cube.hsc";
inline constexpr const char* kLabels = "labels.hsc";
inline constexpr const char* kPretrainCkpt = "pretrain.ckpt";
inline constexpr const char* kPretrainLog = "pretrain_log.tsv";
inline constexpr const char* kRanking = "ranking.tsv";
inline constexpr const char* kClassifierCkpt = "classifier.ckpt";
inline constexpr const char* kClassifierLog = "classifier_log.tsv";
inline constexpr const char* kMetricsText = "metrics.txt";
inline constexpr const char* kMetricsJson = "metrics.json";
inline constexpr const char* kMapRaster = "map.hsc";
inline constexpr const char* kMapImage = "map.ppm";
inline constexpr const char* kLock = ".lock";
}  // namespace files

inline std::string path_in(const std::string& dir, const char* name) {
  return (std::filesystem::path(dir) / name).string();
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), "cannot open " + path + " for writing");
  out << text;
  require(static_cast<bool>(out), "write failed: " + path);
}

/// Exclusive lock on an output directory, held for the lifetime of the object.
class DirLock {
 public:
  explicit DirLock(const std::string& dir) : path_(path_in(dir, files::kLock)) {
    std::filesystem::create_directories(dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
      if (errno == EEXIST) throw Error("output directory is locked by another run: " + path_);
      throw Error("cannot create lock " + path_ + ": " + std::strerror(errno));
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  ~DirLock() { std::filesystem::remove(path_); }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::string path_;
};

// ------------------------------------------------------------------- scene

struct Scene {
  HsiCube cube;  // normalised
  LabelRaster labels;
};

inline Scene load_scene(const RunConfig& cfg) {
  Scene s;
  if (cfg.data.cube_path.empty()) {
    auto [cube, labels] = synth_cube(cfg.data.synth, cfg.scene_seed());
    s.cube = std::move(cube);
    s.labels = std::move(labels);
  } else {
    s.cube = load_cube(cfg.data.cube_path);
    s.labels = load_labels(cfg.data.labels_path);
    require(s.cube.height == s.labels.height && s.cube.width == s.labels.width,
            "cube and label raster differ in spatial size");
  }
  if (cfg.data.normalize == "minmax") s.cube = normalize_cube(std::move(s.cube), NormalizeMode::kMinMax);
  if (cfg.data.normalize == "standardize") s.cube = normalize_cube(std::move(s.cube), NormalizeMode::kStandardize);
  return s;
}

inline SplitStrategy split_strategy(const RunConfig& cfg) {
  return cfg.data.split == "count" ? SplitStrategy::per_class_count(cfg.data.split_count)
                                   : SplitStrategy::per_class_fraction(cfg.data.split_fraction);
}

inline SampleSplit make_split(const RunConfig& cfg, const Scene& scene) {
  return split_samples(scene.labels, split_strategy(cfg), cfg.seed);
}

inline NoiseSchedule schedule_of(const RunConfig& cfg) {
  return make_schedule(cfg.diffusion.T, cfg.diffusion.beta_start, cfg.diffusion.beta_end);
}

inline DenoiserConfig denoiser_config(const RunConfig& cfg, int bands) {
  return {bands, cfg.model.width, cfg.model.groups, cfg.model.time_dim, cfg.model.layer_scale};
}

inline ClassifierConfig classifier_config(const RunConfig& cfg, int bands, int classes, HeadKind head) {
  return {cfg.model.width, bands, cfg.model.d_cls, cfg.model.reduction, cfg.model.norm_groups, classes, head};
}

template <typename S>
Mat<S> gather_patches(const HsiCube& cube, const std::vector<int>& pixels, std::size_t begin, std::size_t end,
                      int patch) {
  const Eigen::Index n = static_cast<Eigen::Index>(patch) * patch;
  Mat<S> out(static_cast<Eigen::Index>(end - begin) * n, cube.bands);
  for (std::size_t i = begin; i < end; ++i) {
    out.middleRows(static_cast<Eigen::Index>(i - begin) * n, n) =
        extract_patch<S>(cube, pixel_of(pixels[i], cube.width), patch);
  }
  return out;
}

// --------------------------------------------------------------- pretraining

/// Denoiser, contrastive encoder and uncertainty weights trained jointly.
/// Not movable: optimisers keep pointers into it.
template <typename S>
struct PretrainModel {
  Denoiser<S> denoiser;
  ContrastiveEncoder<S> encoder;
  UncertaintyWeights<S> weights;

  PretrainModel(const RunConfig& cfg, int bands)
      : denoiser(denoiser_config(cfg, bands), cfg.seed), encoder(bands, cfg.seed) {}
  PretrainModel(const PretrainModel&) = delete;
  PretrainModel& operator=(const PretrainModel&) = delete;

  ParamList<S> parameters() {
    ParamList<S> out = denoiser.parameters();
    for (Parameter<S>* p : encoder.parameters()) out.push_back(p);
    out.push_back(&weights.w_diff);
    out.push_back(&weights.w_rec);
    return out;
  }
};

struct PretrainRecord {
  int step = 0;
  double l_diff = 0, l_rec = 0, l_con = 0, w_diff = 0, w_rec = 0, total = 0;
};

inline constexpr const char* kPretrainLogHeader = "step\tl_diff\tl_rec\tl_con\tw_diff\tw_rec\ttotal\n";

inline std::string format_record(const PretrainRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%d\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\n", r.step, r.l_diff, r.l_rec, r.l_con,
                r.w_diff, r.w_rec, r.total);
  return buf;
}

inline std::vector<PretrainRecord> parse_pretrain_log(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  require(std::getline(in, line) && line + "\n" == kPretrainLogHeader, "pretrain log: bad header");
  std::vector<PretrainRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    PretrainRecord r;
    require(std::sscanf(line.c_str(), "%d\t%lf\t%lf\t%lf\t%lf\t%lf\t%lf", &r.step, &r.l_diff, &r.l_rec, &r.l_con,
                        &r.w_diff, &r.w_rec, &r.total) == 7,
            "pretrain log: bad line '" + line + "'");
    out.push_back(r);
  }
  return out;
}

/// One optimisation step on a batch of clean patches x0 (geo.batch instances).
/// Batch contents, timesteps and noise are all supplied by the caller.
template <typename S>
PretrainRecord pretrain_step(PretrainModel<S>& model, Adam<S>& opt, const Mat<S>& x0, const Geometry& geo,
                             const std::vector<int>& ts, const Mat<S>& eps, const NoiseSchedule& sched,
                             const PretrainConfig& pc) {
  Graph<S> g(true);
  Var x0v = g.constant(x0);
  Var epsv = g.constant(eps);
  Var x_t = g.constant(q_sample_batch<S>(x0, geo, ts, eps, sched));
  Var eps_hat = model.denoiser.forward(g, x_t, geo, ts).eps_hat;
  Var l_diff = pc.loss == "mse" ? ops::mse(g, eps_hat, epsv) : ops::lae(g, eps_hat, epsv);

  std::vector<S> a, c;
  predict_x0_coefficients<S>(ts, sched, a, c);
  Var x0_hat = ops::sub(g, ops::instance_scale(g, x_t, geo, a), ops::instance_scale(g, eps_hat, geo, c));
  Var l_rec = ops::lae(g, x0_hat, x0v);

  // Both views go through the encoder as one batch of 2B instances.
  const Geometry pair_geo{2 * geo.batch, geo.height, geo.width};
  Var z = model.encoder.forward(g, ops::concat_rows(g, x0v, x0_hat), pair_geo);
  Var l_con = ops::info_nce(g, ops::slice_rows(g, z, 0, geo.batch), ops::slice_rows(g, z, geo.batch, geo.batch),
                            static_cast<S>(pc.tau));

  Var total = ops::compound(g, l_diff, l_rec, l_con, g.param(model.weights.w_diff), g.param(model.weights.w_rec));
  PretrainRecord r;
  r.l_diff = g.scalar(l_diff);
  r.l_rec = g.scalar(l_rec);
  r.l_con = g.scalar(l_con);
  r.total = g.scalar(total);
  r.w_diff = model.weights.diff();
  r.w_rec = model.weights.rec();
  if (!std::isfinite(r.total)) return r;
  opt.zero_grad();
  g.backward(total);
  opt.step();
  return r;
}

/// Runs steps [first_step, cfg.pretrain.steps) over the unlabelled pool of
/// every pixel. Step s draws its batch, timesteps and noise from substreams
/// indexed by s, so a resumed run continues the same sequence.
template <typename S>
std::vector<PretrainRecord> pretrain(PretrainModel<S>& model, Adam<S>& opt, const HsiCube& cube, const RunConfig& cfg,
                                     std::ostream* log = nullptr, int first_step = 0) {
  const NoiseSchedule sched = schedule_of(cfg);
  const int B = cfg.pretrain.batch;
  const int P = cfg.data.patch;
  const Geometry geo{B, P, P};
  std::vector<PretrainRecord> records;
  for (int step = first_step; step < cfg.pretrain.steps; ++step) {
    Engine rng = substream(cfg.seed, "pretrain.step", static_cast<std::uint64_t>(step));
    std::uniform_int_distribution<int> pick(0, cube.pixels() - 1);
    std::uniform_int_distribution<int> pick_t(1, sched.T);
    std::vector<int> pixels(B);
    std::vector<int> ts(B);
    for (int b = 0; b < B; ++b) pixels[b] = pick(rng);
    for (int b = 0; b < B; ++b) ts[b] = pick_t(rng);
    Mat<S> x0 = gather_patches<S>(cube, pixels, 0, pixels.size(), P);
    Mat<S> eps = gaussian<S>(x0.rows(), x0.cols(), rng);
    PretrainRecord r;
    try {
      r = pretrain_step(model, opt, x0, geo, ts, eps, sched, cfg.pretrain);
    } catch (const Error& e) {
      // The loss ops reject NaN / non-finite inputs themselves.
      const std::string what = e.what();
      if (what.find("NaN") == std::string::npos && what.find("non-finite") == std::string::npos) throw;
      r.total = std::numeric_limits<double>::quiet_NaN();
    }
    r.step = step + 1;
    if (!std::isfinite(r.total)) {
      throw Error("pretrain diverged: non-finite loss at step " + std::to_string(r.step));
    }
    r.w_diff = model.weights.diff();
    r.w_rec = model.weights.rec();
    if (log != nullptr) *log << format_record(r) << std::flush;
    records.push_back(r);
  }
  return records;
}

template <typename S>
Checkpoint pretrain_checkpoint(PretrainModel<S>& model, Adam<S>& opt, const RunConfig& cfg) {
  Checkpoint ck;
  ck.kind = "pretrain";
  ck.config_hash = config_hash(cfg);
  ck.meta["bands"] = std::to_string(model.denoiser.config().bands);
  ck.meta["w_diff"] = std::to_string(static_cast<double>(model.weights.diff()));
  ck.meta["w_rec"] = std::to_string(static_cast<double>(model.weights.rec()));
  store_params(ck, model.parameters());
  store_optimizer(ck, opt);
  return ck;
}

inline void check_compatible(const Checkpoint& ck, const RunConfig& cfg, const std::string& kind) {
  require(ck.kind == kind, "checkpoint kind is '" + ck.kind + "', expected '" + kind + "'");
  const std::string h = config_hash(cfg);
  if (ck.config_hash != h) {
    throw Error("config hash mismatch: checkpoint " + ck.config_hash + ", config " + h);
  }
}

/// Restores a pretrain checkpoint into a fresh model (and optimiser state if given).
template <typename S>
std::unique_ptr<PretrainModel<S>> load_pretrained(const Checkpoint& ck, const RunConfig& cfg, int bands,
                                                  Adam<S>* opt = nullptr) {
  check_compatible(ck, cfg, "pretrain");
  auto model = std::make_unique<PretrainModel<S>>(cfg, bands);
  restore_params(ck, model->parameters());
  if (opt != nullptr) restore_optimizer(ck, *opt);
  return model;
}

// ------------------------------------------------------------------ ranking

/// Probe pixels for timestep ranking: a seeded sample of the unlabelled pool.
inline std::vector<int> probe_pixels(const HsiCube& cube, int count, std::uint64_t seed) {
  std::vector<int> all(static_cast<std::size_t>(cube.pixels()));
  std::iota(all.begin(), all.end(), 0);
  Engine rng = substream(seed, "rank.probe");
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(std::min<std::size_t>(all.size(), static_cast<std::size_t>(count)));
  std::sort(all.begin(), all.end());
  return all;
}

template <typename S>
TimestepRanking rank_with_denoiser(Denoiser<S>& denoiser, const HsiCube& cube, const RunConfig& cfg) {
  const NoiseSchedule sched = schedule_of(cfg);
  const int P = cfg.data.patch;
  std::vector<Mat<S>> probes;
  for (int p : probe_pixels(cube, cfg.select.probe, cfg.seed)) {
    probes.push_back(extract_patch<S>(cube, pixel_of(p, cube.width), P));
  }
  BatchNoisePredictor<S> pred = [&denoiser](const Mat<S>& x, const Geometry& geo, const std::vector<int>& ts) {
    return denoiser.predict(x, geo, ts);
  };
  const int k = std::min<int>(cfg.select.k, static_cast<int>(default_candidates(sched.T, cfg.select.stride).size()));
  return rank_timesteps<S>(pred, sched, probes, P, default_candidates(sched.T, cfg.select.stride), k, cfg.seed,
                           cfg.classify.eval_chunk);
}

// --------------------------------------------------------------- classifier

/// Per-pixel noise for feature extraction at evaluation time: each pixel has
/// its own substream, so predictions do not depend on batching.
template <typename S>
std::vector<Mat<S>> eval_noise(const std::vector<int>& pixels, std::size_t begin, std::size_t end, int tokens,
                               int bands, std::size_t n_timesteps, std::uint64_t seed) {
  std::vector<Mat<S>> eps(n_timesteps, Mat<S>(static_cast<Eigen::Index>(end - begin) * tokens, bands));
  for (std::size_t i = begin; i < end; ++i) {
    Engine rng = substream(seed, "eval.noise", static_cast<std::uint64_t>(pixels[i]));
    for (std::size_t j = 0; j < n_timesteps; ++j) {
      eps[j].middleRows(static_cast<Eigen::Index>(i - begin) * tokens, tokens) = gaussian<S>(tokens, bands, rng);
    }
  }
  return eps;
}

/// Logits for a batch of pixels; `eps` is ignored by the raw head.
template <typename S>
Var batch_logits(Graph<S>& g, Denoiser<S>& denoiser, Classifier<S>& clf, const Mat<S>& x0, const Geometry& geo,
                 const std::vector<int>& ts, const NoiseSchedule& sched, const std::vector<Mat<S>>& eps) {
  if (clf.config().head == HeadKind::kRaw) return clf.raw_logits(g, x0, geo);
  return clf.logits(g, extract_stage_features(denoiser, x0, geo, ts, sched, eps), geo);
}

struct ClassifierRecord {
  int epoch = 0;
  double loss = 0.0;
  double train_accuracy = 0.0;
};

inline constexpr const char* kClassifierLogHeader = "epoch\tloss\ttrain_accuracy\n";

inline std::string format_record(const ClassifierRecord& r) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%d\t%.9g\t%.9g\n", r.epoch, r.loss, r.train_accuracy);
  return buf;
}

/// Trains the classifier on the labelled training pixels. The denoiser is
/// frozen; any change to its parameters is a hard error. Each epoch shuffles
/// the training set and draws fresh diffusion noise.
template <typename S>
std::vector<ClassifierRecord> train_classifier(Denoiser<S>& denoiser, Classifier<S>& clf, Adam<S>& opt,
                                               const Scene& scene, const std::vector<int>& train_pixels,
                                               const std::vector<int>& ts, const RunConfig& cfg,
                                               std::ostream* log = nullptr) {
  require(!train_pixels.empty(), "train_classifier: empty training split");
  const NoiseSchedule sched = schedule_of(cfg);
  const int P = cfg.data.patch;
  const std::uint64_t frozen = checksum(denoiser.parameters());
  std::vector<ClassifierRecord> records;
  std::vector<int> order = train_pixels;
  for (int epoch = 0; epoch < cfg.classify.epochs; ++epoch) {
    Engine shuffle_rng = substream(cfg.seed, "classify.shuffle", static_cast<std::uint64_t>(epoch));
    Engine noise_rng = substream(cfg.seed, "classify.noise", static_cast<std::uint64_t>(epoch));
    order = train_pixels;
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(cfg.classify.batch)) {
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.classify.batch));
      const Geometry geo{static_cast<int>(end - begin), P, P};
      Mat<S> x0 = gather_patches<S>(scene.cube, order, begin, end, P);
      std::vector<int> y;
      for (std::size_t i = begin; i < end; ++i) y.push_back(scene.labels.labels[order[i]]);
      std::vector<Mat<S>> eps;
      if (clf.config().head != HeadKind::kRaw) {
        for (std::size_t j = 0; j < ts.size(); ++j) eps.push_back(gaussian<S>(x0.rows(), x0.cols(), noise_rng));
      }
      Graph<S> g(true);
      Var logits = batch_logits(g, denoiser, clf, x0, geo, ts, sched, eps);
      Var loss = cross_entropy(g, logits, y);
      const Mat<S>& z = g.value(logits);
      for (Eigen::Index i = 0; i < z.rows(); ++i) {
        Eigen::Index arg = 0;
        z.row(i).maxCoeff(&arg);
        correct += static_cast<int>(arg) == y[i] ? 1 : 0;
      }
      loss_sum += static_cast<double>(g.scalar(loss)) * static_cast<double>(end - begin);
      require(std::isfinite(loss_sum), "train_classifier: non-finite loss in epoch " + std::to_string(epoch + 1));
      opt.zero_grad();
      g.backward(loss);
      opt.step();
    }
    ClassifierRecord r{epoch + 1, loss_sum / static_cast<double>(order.size()),
                       static_cast<double>(correct) / static_cast<double>(order.size())};
    if (log != nullptr) *log << format_record(r) << std::flush;
    records.push_back(r);
  }
  if (checksum(denoiser.parameters()) != frozen) {
    throw Error("train_classifier: frozen denoiser parameters changed during classifier training");
  }
  return records;
}

/// Predicted class for every pixel in `pixels`, processed in chunks.
template <typename S>
std::vector<int> predict_pixels(Denoiser<S>& denoiser, Classifier<S>& clf, const HsiCube& cube,
                                const std::vector<int>& pixels, const std::vector<int>& ts, const RunConfig& cfg) {
  const NoiseSchedule sched = schedule_of(cfg);
  const int P = cfg.data.patch;
  std::vector<int> out;
  out.reserve(pixels.size());
  const std::size_t chunk = static_cast<std::size_t>(cfg.classify.eval_chunk);
  for (std::size_t begin = 0; begin < pixels.size(); begin += chunk) {
    const std::size_t end = std::min(pixels.size(), begin + chunk);
    const Geometry geo{static_cast<int>(end - begin), P, P};
    Mat<S> x0 = gather_patches<S>(cube, pixels, begin, end, P);
    std::vector<Mat<S>> eps;
    if (clf.config().head != HeadKind::kRaw) eps = eval_noise<S>(pixels, begin, end, P * P, cube.bands, ts.size(), cfg.seed);
    Graph<S> g(false);
    const Mat<S>& z = g.value(batch_logits(g, denoiser, clf, x0, geo, ts, sched, eps));
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      Eigen::Index arg = 0;
      z.row(i).maxCoeff(&arg);
      out.push_back(static_cast<int>(arg));
    }
  }
  return out;
}

template <typename S>
Checkpoint classifier_checkpoint(Classifier<S>& clf, Adam<S>& opt, const std::vector<int>& ts, const RunConfig& cfg) {
  Checkpoint ck;
  ck.kind = "classifier";
  ck.config_hash = config_hash(cfg);
  ck.meta["head"] = head_name(clf.config().head);
  ck.meta["classes"] = std::to_string(clf.config().classes);
  std::string t_list;
  for (int t : ts) t_list += (t_list.empty() ? "" : ",") + std::to_string(t);
  ck.meta["timesteps"] = t_list;
  store_params(ck, clf.parameters());
  store_optimizer(ck, opt);
  return ck;
}

inline std::vector<int> checkpoint_timesteps(const Checkpoint& ck) {
  std::vector<int> ts;
  auto it = ck.meta.find("timesteps");
  require(it != ck.meta.end(), "classifier checkpoint has no timestep list");
  std::stringstream ss(it->second);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) ts.push_back(std::stoi(item));
  }
  return ts;
}

template <typename S>
std::unique_ptr<Classifier<S>> load_classifier(const Checkpoint& ck, const RunConfig& cfg, int bands) {
  check_compatible(ck, cfg, "classifier");
  const HeadKind head = parse_head(ck.meta.at("head"));
  const int classes = std::stoi(ck.meta.at("classes"));
  auto clf = std::make_unique<Classifier<S>>(classifier_config(cfg, bands, classes, head), cfg.seed);
  restore_params(ck, clf->parameters());
  return clf;
}

// --------------------------------------------------------------- evaluation

struct Evaluation {
  ConfusionMatrix confusion;
  Metrics metrics;
};

inline Evaluation evaluate_predictions(const LabelRaster& labels, const std::vector<int>& pixels,
                                       const std::vector<int>& predicted) {
  std::vector<int> truth;
  truth.reserve(pixels.size());
  for (int p : pixels) truth.push_back(labels.labels[p]);
  Evaluation e;
  e.confusion = build_confusion(truth, predicted, labels.num_classes());
  e.metrics = compute_metrics(e.confusion);
  return e;
}

/// Text report: config hash, per-class table with summary rows, confusion matrix.
inline std::string format_report(const Evaluation& e, const std::vector<std::string>& class_names,
                                 const std::string& hash) {
  std::vector<std::map<std::string, double>> runs{metric_dict(e.metrics, class_names)};
  std::string out = "config_hash " + hash + "\n";
  out += format_metric_table(aggregate_runs(runs), class_names, false);
  out += "confusion (rows = true class)\n";
  for (int i = 0; i < e.confusion.classes; ++i) {
    for (int j = 0; j < e.confusion.classes; ++j) out += (j ? "\t" : "") + std::to_string(e.confusion.at(i, j));
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------- map image

/// Fixed 24-bit palette for class maps; index 0..N-1, unlabelled drawn black.
inline const std::vector<std::array<std::uint8_t, 3>>& class_palette() {
  static const std::vector<std::array<std::uint8_t, 3>> palette = {
      {230, 25, 75},   {60, 180, 75},   {255, 225, 25},  {0, 130, 200},   {245, 130, 48},  {145, 30, 180},
      {70, 240, 240},  {240, 50, 230},  {210, 245, 60},  {250, 190, 212}, {0, 128, 128},   {220, 190, 255},
      {170, 110, 40},  {255, 250, 200}, {128, 0, 0},     {170, 255, 195}, {128, 128, 0},   {255, 215, 180},
      {0, 0, 128},     {128, 128, 128},
  };
  return palette;
}

/// Binary PPM (P6) of a class raster. Pixels with label < 0 are black.
inline std::string render_ppm(const LabelRaster& map, int classes) {
  const auto& palette = class_palette();
  if (classes > static_cast<int>(palette.size())) {
    throw Error("palette has " + std::to_string(palette.size()) + " entries, map needs " + std::to_string(classes));
  }
  std::string out = "P6\n" + std::to_string(map.width) + " " + std::to_string(map.height) + "\n255\n";
  out.reserve(out.size() + map.labels.size() * 3);
  for (std::int32_t y : map.labels) {
    require(y < classes, "render_ppm: label " + std::to_string(y) + " outside class range");
    const std::array<std::uint8_t, 3> rgb = y < 0 ? std::array<std::uint8_t, 3>{0, 0, 0} : palette[y];
    out.append(reinterpret_cast<const char*>(rgb.data()), 3);
  }
  return out;
}

/// Classifies every pixel of the scene; with `mask_unlabeled` pixels without
/// ground truth are set to -1.
template <typename S>
LabelRaster predict_map(Denoiser<S>& denoiser, Classifier<S>& clf, const Scene& scene, const std::vector<int>& ts,
                        const RunConfig& cfg, bool mask_unlabeled = false) {
  std::vector<int> all(static_cast<std::size_t>(scene.cube.pixels()));
  std::iota(all.begin(), all.end(), 0);
  const std::vector<int> pred = predict_pixels(denoiser, clf, scene.cube, all, ts, cfg);
  LabelRaster map;
  map.height = scene.cube.height;
  map.width = scene.cube.width;
  map.class_names = scene.labels.class_names;
  map.labels.assign(pred.begin(), pred.end());
  if (mask_unlabeled) {
    for (std::size_t i = 0; i < map.labels.size(); ++i) {
      if (scene.labels.labels[i] < 0) map.labels[i] = LabelRaster::kUnlabeled;
    }
  }
  return map;
}

}  // namespace diffcrn
