#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "nlohmann/json.hpp"
#include "polarbev/metrics.hpp"
#include "polarbev/model.hpp"

namespace polarbev {

inline constexpr const char* kVersion = "polarbev-0.1.0";

// Flat experiment configuration. Every knob lives at the top level of one
// JSON object; unknown keys are rejected so typos cannot silently fall back
// to defaults. The seed here is the only source of randomness in a run.
struct ExperimentConfig {
  uint64_t seed = 1;
  ModelConfig model;
  int min_objects = 1;
  int max_objects = 4;
  int train_scenes = 256;
  int eval_scenes = 64;
  int epochs = 2;
  int batch_size = 4;
  double lr = 1e-3;
  std::string lr_schedule = "constant";  // "constant" or "cosine"
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double lambda_reg = 0.25;
  double score_thresh = 0.3;
  int max_dets = 64;
  std::vector<int> eval_resolutions = {16, 24, 32, 48, 64};

  void validate() const {
    model.validate();
    if (min_objects < 0 || max_objects < min_objects)
      throw std::invalid_argument("config: need 0 <= min_objects <= max_objects");
    if (train_scenes < 1 || eval_scenes < 1)
      throw std::invalid_argument("config: scene counts must be >= 1");
    if (epochs < 0) throw std::invalid_argument("config: epochs < 0");
    if (batch_size < 1) throw std::invalid_argument("config: batch_size < 1");
    if (!(lr > 0.0)) throw std::invalid_argument("config: lr <= 0");
    if (lr_schedule != "constant" && lr_schedule != "cosine")
      throw std::invalid_argument("config: lr_schedule must be 'constant' or 'cosine'");
    if (eval_resolutions.empty()) throw std::invalid_argument("config: empty eval_resolutions");
    for (int r : eval_resolutions)
      if (r < 8) throw std::invalid_argument("config: eval resolution < 8");
  }
};

// canonical JSON form: fixed key order, used verbatim in reports and
// checkpoints so that identical configs always produce identical bytes
inline nlohmann::ordered_json config_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  j["cameras"] = c.model.cameras;
  j["fov_deg"] = c.model.fov_deg;
  j["image_width"] = c.model.image_width;
  j["image_height"] = c.model.image_height;
  j["patch"] = c.model.patch;
  j["extent"] = c.model.extent;
  j["azimuth_bins"] = c.model.azimuth_bins;
  j["radial_bins"] = c.model.radial_bins;
  j["channels"] = c.model.channels;
  j["depth_bins"] = c.model.depth_bins;
  j["heads"] = c.model.heads;
  j["scales"] = c.model.scales;
  j["mbie_points"] = c.model.mbie_points;
  j["mbie_layers"] = c.model.mbie_layers;
  j["head_resolution"] = c.model.head_resolution;
  j["num_classes"] = c.model.num_classes;
  j["baseline"] = c.model.baseline;
  j["use_cpbt"] = c.model.use_cpbt;
  j["use_mbie"] = c.model.use_mbie;
  j["min_objects"] = c.min_objects;
  j["max_objects"] = c.max_objects;
  j["train_scenes"] = c.train_scenes;
  j["eval_scenes"] = c.eval_scenes;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["lr"] = c.lr;
  j["lr_schedule"] = c.lr_schedule;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["adam_eps"] = c.adam_eps;
  j["lambda_reg"] = c.lambda_reg;
  j["score_thresh"] = c.score_thresh;
  j["max_dets"] = c.max_dets;
  j["eval_resolutions"] = c.eval_resolutions;
  return j;
}

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("config: top level must be a JSON object");
  ExperimentConfig c;
  for (const auto& [key, val] : j.items()) {
    try {
      if (key == "seed") c.seed = val.get<uint64_t>();
      else if (key == "cameras") c.model.cameras = val.get<int>();
      else if (key == "fov_deg") c.model.fov_deg = val.get<double>();
      else if (key == "image_width") c.model.image_width = val.get<int>();
      else if (key == "image_height") c.model.image_height = val.get<int>();
      else if (key == "patch") c.model.patch = val.get<int>();
      else if (key == "extent") c.model.extent = val.get<double>();
      else if (key == "azimuth_bins") c.model.azimuth_bins = val.get<int>();
      else if (key == "radial_bins") c.model.radial_bins = val.get<int>();
      else if (key == "channels") c.model.channels = val.get<int>();
      else if (key == "depth_bins") c.model.depth_bins = val.get<int>();
      else if (key == "heads") c.model.heads = val.get<int>();
      else if (key == "scales") c.model.scales = val.get<std::vector<int>>();
      else if (key == "mbie_points") c.model.mbie_points = val.get<int>();
      else if (key == "mbie_layers") c.model.mbie_layers = val.get<int>();
      else if (key == "head_resolution") c.model.head_resolution = val.get<int>();
      else if (key == "num_classes") c.model.num_classes = val.get<int>();
      else if (key == "baseline") c.model.baseline = val.get<bool>();
      else if (key == "use_cpbt") c.model.use_cpbt = val.get<bool>();
      else if (key == "use_mbie") c.model.use_mbie = val.get<bool>();
      else if (key == "min_objects") c.min_objects = val.get<int>();
      else if (key == "max_objects") c.max_objects = val.get<int>();
      else if (key == "train_scenes") c.train_scenes = val.get<int>();
      else if (key == "eval_scenes") c.eval_scenes = val.get<int>();
      else if (key == "epochs") c.epochs = val.get<int>();
      else if (key == "batch_size") c.batch_size = val.get<int>();
      else if (key == "lr") c.lr = val.get<double>();
      else if (key == "lr_schedule") c.lr_schedule = val.get<std::string>();
      else if (key == "beta1") c.beta1 = val.get<double>();
      else if (key == "beta2") c.beta2 = val.get<double>();
      else if (key == "adam_eps") c.adam_eps = val.get<double>();
      else if (key == "lambda_reg") c.lambda_reg = val.get<double>();
      else if (key == "score_thresh") c.score_thresh = val.get<double>();
      else if (key == "max_dets") c.max_dets = val.get<int>();
      else if (key == "eval_resolutions") c.eval_resolutions = val.get<std::vector<int>>();
      else throw std::invalid_argument("config: unknown key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument("config: bad value for key '" + key + "': " + e.what());
    }
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("config: cannot open " + path);
  nlohmann::json j;
  is >> j;
  return parse_config(j);
}

inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t config_hash(const ExperimentConfig& c) {
  const std::string s = config_json(c).dump();
  return fnv1a(s.data(), s.size());
}

// ---------------------------------------------------------------------------
// checkpoints: canonical config string + its hash + the raw parameter table

inline void save_checkpoint(std::ostream& os, const ExperimentConfig& cfg, const Model& model) {
  const std::string cs = config_json(cfg).dump();
  auto w64 = [&](uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 8);
  };
  w64(0x5042434B'30303031ULL);  // "PBCK0001"
  w64(cs.size());
  os.write(cs.data(), static_cast<std::streamsize>(cs.size()));
  w64(fnv1a(cs.data(), cs.size()));
  model.ps.save(os);
}

inline void save_checkpoint(const std::string& path, const ExperimentConfig& cfg,
                            const Model& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  save_checkpoint(os, cfg, model);
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

struct Checkpoint {
  ExperimentConfig cfg;
  std::shared_ptr<Model> model;
};

inline Checkpoint load_checkpoint(std::istream& is) {
  auto r64 = [&]() {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
  };
  if (r64() != 0x5042434B'30303031ULL) throw std::runtime_error("checkpoint: bad magic");
  std::string cs(r64(), '\0');
  is.read(cs.data(), static_cast<std::streamsize>(cs.size()));
  const uint64_t h = r64();
  if (!is || h != fnv1a(cs.data(), cs.size()))
    throw std::runtime_error("checkpoint: config hash mismatch");
  Checkpoint ck;
  ck.cfg = parse_config(nlohmann::json::parse(cs));
  ck.model = std::make_shared<Model>(ck.cfg.model, ck.cfg.seed);
  ck.model->ps.load(is);
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  return load_checkpoint(is);
}

// ---------------------------------------------------------------------------
// datasets: scene index space is [0, train_scenes) for training and
// [train_scenes, train_scenes + eval_scenes) for evaluation, so the two
// splits never share a random stream

struct Dataset {
  std::vector<SceneGT> scenes;
  std::vector<std::vector<Tensor>> views;
  uint64_t data_hash = 0;
};

inline Dataset make_dataset(const ExperimentConfig& cfg, const CameraRig& rig,
                            uint64_t first_index, int count) {
  SceneSpec ss;
  ss.seed = cfg.seed;
  ss.min_objects = cfg.min_objects;
  ss.max_objects = cfg.max_objects;
  ss.extent = cfg.model.extent;
  ss.num_classes = cfg.model.num_classes;
  ss.validate();
  Dataset ds;
  uint64_t h = 0xcbf29ce484222325ULL;
  for (int i = 0; i < count; ++i) {
    SceneGT sc = gen_scene(ss, first_index + static_cast<uint64_t>(i));
    for (const auto& b : sc.boxes) {
      const double vals[6] = {b.x, b.y, b.w, b.l, b.yaw, static_cast<double>(b.cls)};
      h = fnv1a(vals, sizeof(vals), h);
    }
    ds.views.push_back(render_views(sc, rig));
    ds.scenes.push_back(std::move(sc));
  }
  ds.data_hash = h;
  return ds;
}

// ---------------------------------------------------------------------------
// training

struct TrainOutput {
  std::shared_ptr<Model> model;
  double initial_loss = 0.0;               // mean training-set loss before any update
  double final_loss = 0.0;                 // mean training-set loss after the last epoch
  std::vector<double> epoch_losses;        // mean step loss per epoch
  uint64_t train_data_hash = 0;
  MetricsReport final_eval;                // eval split at the training resolution
};

inline double mean_dataset_loss(const Model& model, const Dataset& ds, int resolution,
                                double lambda_reg) {
  double acc = 0.0;
  for (size_t i = 0; i < ds.scenes.size(); ++i) {
    HeadOutput out = model.forward(ds.views[i], resolution);
    acc += model.loss(out, ds.scenes[i], lambda_reg)->val[0];
  }
  return acc / static_cast<double>(ds.scenes.size());
}

inline MetricsReport evaluate_model(const Model& model, const Dataset& ds, int resolution,
                                    const ExperimentConfig& cfg) {
  if (resolution < 8) throw std::invalid_argument("evaluate_model: resolution < 8");
  std::vector<std::vector<Detection>> dets;
  dets.reserve(ds.scenes.size());
  for (const auto& views : ds.views)
    dets.push_back(model.detect(views, resolution, cfg.score_thresh, cfg.max_dets));
  return evaluate_detections(dets, ds.scenes, cfg.model.num_classes, cfg.model.extent,
                             resolution);
}

inline TrainOutput train(const ExperimentConfig& cfg) {
  cfg.validate();
  TrainOutput out;
  out.model = std::make_shared<Model>(cfg.model, cfg.seed);
  Model& model = *out.model;
  Dataset train_ds = make_dataset(cfg, model.rig, 0, cfg.train_scenes);
  out.train_data_hash = train_ds.data_hash;

  out.initial_loss = mean_dataset_loss(model, train_ds, cfg.model.head_resolution, cfg.lambda_reg);

  Adam opt(model.ps, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
  Rng shuffle_rng(cfg.seed ^ 0xA5A5A5A55A5A5A5AULL);
  std::vector<size_t> order(train_ds.scenes.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  model.ps.zero_grads();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.lr_schedule == "cosine")
      opt.set_lr(cfg.lr * 0.5 * (1.0 + std::cos(M_PI * epoch / cfg.epochs)));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<size_t>(shuffle_rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);
    double epoch_acc = 0.0;
    int in_batch = 0;
    for (size_t step = 0; step < order.size(); ++step) {
      const size_t sc = order[step];
      HeadOutput ho = model.forward(train_ds.views[sc], cfg.model.head_resolution);
      Var l = model.loss(ho, train_ds.scenes[sc], cfg.lambda_reg);
      const double lv = l->val[0];
      if (!std::isfinite(lv)) {
        std::ostringstream msg;
        msg << "train: non-finite loss " << lv << " at epoch " << epoch << " step " << step
            << " (scene " << sc << ")";
        throw std::runtime_error(msg.str());
      }
      epoch_acc += lv;
      backward(l);
      if (++in_batch == cfg.batch_size || step + 1 == order.size()) {
        opt.step();
        model.ps.zero_grads();
        in_batch = 0;
      }
    }
    out.epoch_losses.push_back(epoch_acc / static_cast<double>(order.size()));
  }

  out.final_loss = cfg.epochs == 0
                       ? out.initial_loss
                       : mean_dataset_loss(model, train_ds, cfg.model.head_resolution, cfg.lambda_reg);

  Dataset eval_ds = make_dataset(cfg, model.rig, static_cast<uint64_t>(cfg.train_scenes),
                                 cfg.eval_scenes);
  out.final_eval = evaluate_model(model, eval_ds, cfg.model.head_resolution, cfg);
  return out;
}

// ---------------------------------------------------------------------------
// multi-resolution evaluation; the report is deterministic (no wall-clock
// content) so identical runs emit identical bytes

struct EvalOutput {
  std::vector<MetricsReport> reports;
  uint64_t eval_data_hash = 0;
};

inline EvalOutput eval_multires(const Model& model, const ExperimentConfig& cfg,
                                const std::vector<int>& resolutions) {
  if (resolutions.empty()) throw std::invalid_argument("eval_multires: no resolutions");
  for (int r : resolutions)
    if (r < 8) throw std::invalid_argument("eval_multires: resolution < 8");
  Dataset eval_ds = make_dataset(cfg, model.rig, static_cast<uint64_t>(cfg.train_scenes),
                                 cfg.eval_scenes);
  EvalOutput out;
  out.eval_data_hash = eval_ds.data_hash;
  for (int r : resolutions) out.reports.push_back(evaluate_model(model, eval_ds, r, cfg));
  return out;
}

inline nlohmann::ordered_json metrics_report_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["resolution"] = r.resolution;
  j["mAP"] = fmt_metric(r.mAP);
  j["mATE"] = fmt_metric(r.mATE);
  j["mASE"] = fmt_metric(r.mASE);
  j["mAOE"] = fmt_metric(r.mAOE);
  j["NDS3"] = fmt_metric(r.nds3);
  nlohmann::ordered_json pc = nlohmann::ordered_json::array();
  for (double a : r.per_class_ap) pc.push_back(std::isnan(a) ? "skipped" : fmt_metric(a));
  j["per_class_ap"] = pc;
  return j;
}

inline nlohmann::ordered_json eval_report_json(const ExperimentConfig& cfg,
                                               const EvalOutput& ev) {
  nlohmann::ordered_json j;
  j["version"] = kVersion;
  j["config"] = config_json(cfg);
  j["seed"] = cfg.seed;
  j["eval_data_hash"] = ev.eval_data_hash;
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const auto& r : ev.reports) rows.push_back(metrics_report_json(r));
  j["resolutions"] = rows;
  return j;
}

inline std::string eval_report_csv(const EvalOutput& ev) {
  std::ostringstream os;
  os << metrics_csv_header() << "\n";
  for (const auto& r : ev.reports) os << metrics_csv_row(r) << "\n";
  return os.str();
}

inline nlohmann::ordered_json train_report_json(const ExperimentConfig& cfg,
                                                const TrainOutput& tr) {
  nlohmann::ordered_json j;
  j["version"] = kVersion;
  j["config"] = config_json(cfg);
  j["seed"] = cfg.seed;
  j["train_data_hash"] = tr.train_data_hash;
  j["initial_loss"] = fmt_metric(tr.initial_loss);
  j["final_loss"] = fmt_metric(tr.final_loss);
  nlohmann::ordered_json curve = nlohmann::ordered_json::array();
  for (double l : tr.epoch_losses) curve.push_back(fmt_metric(l));
  j["epoch_losses"] = curve;
  j["final_eval"] = metrics_report_json(tr.final_eval);
  return j;
}

// ---------------------------------------------------------------------------
// ablation: three architectures trained on identical data (same seed, same
// scene index space); emits one row per variant

struct AblationRow {
  std::string name;
  MetricsReport metrics;
  uint64_t train_data_hash = 0;
  uint64_t eval_data_hash = 0;
};

struct AblationOutput {
  std::vector<AblationRow> rows;
  bool ordering_holds = false;  // base mAP <= +CPBT mAP <= full mAP
};

inline AblationOutput ablate(const ExperimentConfig& cfg) {
  struct Variant {
    const char* name;
    bool use_cpbt, use_mbie;
  };
  const Variant variants[3] = {{"base", false, false},
                               {"+cpbt", true, false},
                               {"+cpbt+mbie", true, true}};
  AblationOutput out;
  for (const auto& v : variants) {
    ExperimentConfig c = cfg;
    c.model.use_cpbt = v.use_cpbt;
    c.model.use_mbie = v.use_mbie;
    TrainOutput tr = train(c);
    EvalOutput ev = eval_multires(*tr.model, c, {c.model.head_resolution});
    out.rows.push_back({v.name, ev.reports[0], tr.train_data_hash, ev.eval_data_hash});
  }
  for (size_t i = 1; i < out.rows.size(); ++i)
    if (out.rows[i].train_data_hash != out.rows[0].train_data_hash ||
        out.rows[i].eval_data_hash != out.rows[0].eval_data_hash)
      throw std::runtime_error("ablate: variants ran on different data");
  out.ordering_holds = out.rows[0].metrics.mAP <= out.rows[1].metrics.mAP &&
                       out.rows[1].metrics.mAP <= out.rows[2].metrics.mAP;
  return out;
}

inline nlohmann::ordered_json ablation_report_json(const ExperimentConfig& cfg,
                                                   const AblationOutput& ab) {
  nlohmann::ordered_json j;
  j["version"] = kVersion;
  j["config"] = config_json(cfg);
  j["seed"] = cfg.seed;
  j["ordering_holds"] = ab.ordering_holds;
  if (!ab.ordering_holds)
    j["warning"] = "mAP ordering base <= +cpbt <= +cpbt+mbie did not hold on this seed";
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const auto& r : ab.rows) {
    nlohmann::ordered_json row = metrics_report_json(r.metrics);
    row["variant"] = r.name;
    row["train_data_hash"] = r.train_data_hash;
    rows.push_back(row);
  }
  j["rows"] = rows;
  return j;
}

inline std::string ablation_csv(const AblationOutput& ab) {
  std::ostringstream os;
  os << "variant," << metrics_csv_header() << "\n";
  for (const auto& r : ab.rows) os << r.name << "," << metrics_csv_row(r.metrics) << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// latency benchmark; wall-clock numbers live only here, never in the
// deterministic metrics reports

struct BenchRow {
  int resolution = 0;
  int frames = 0;
  double median_ms = 0.0;
  double p90_ms = 0.0;
};

inline std::vector<BenchRow> bench(const Model& model, const ExperimentConfig& cfg,
                                   const std::vector<int>& resolutions, int frames = 50,
                                   int warmup = 5) {
  if (frames < 50) throw std::invalid_argument("bench: need >= 50 timed frames");
  Dataset ds = make_dataset(cfg, model.rig, static_cast<uint64_t>(cfg.train_scenes), 1);
  const auto& views = ds.views[0];
  std::vector<BenchRow> rows;
  for (int r : resolutions) {
    if (r < 8) throw std::invalid_argument("bench: resolution < 8");
    for (int i = 0; i < warmup; ++i)
      (void)model.detect(views, r, cfg.score_thresh, cfg.max_dets);
    std::vector<double> ms(static_cast<size_t>(frames));
    for (int i = 0; i < frames; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      (void)model.detect(views, r, cfg.score_thresh, cfg.max_dets);
      const auto t1 = std::chrono::steady_clock::now();
      ms[static_cast<size_t>(i)] =
          std::chrono::duration<double, std::milli>(t1 - t0).count();
    }
    std::sort(ms.begin(), ms.end());
    BenchRow row;
    row.resolution = r;
    row.frames = frames;
    row.median_ms = ms[ms.size() / 2];
    row.p90_ms = ms[static_cast<size_t>(0.9 * (static_cast<double>(ms.size()) - 1.0))];
    rows.push_back(row);
  }
  return rows;
}

inline nlohmann::ordered_json bench_report_json(const ExperimentConfig& cfg,
                                                const std::vector<BenchRow>& rows) {
  nlohmann::ordered_json j;
  j["version"] = kVersion;
  j["config"] = config_json(cfg);
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json row;
    row["resolution"] = r.resolution;
    row["frames"] = r.frames;
    row["median_ms"] = r.median_ms;
    row["p90_ms"] = r.p90_ms;
    arr.push_back(row);
  }
  j["latency"] = arr;
  return j;
}

inline std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os << "resolution,frames,median_ms,p90_ms\n";
  for (const auto& r : rows)
    os << r.resolution << "," << r.frames << "," << r.median_ms << "," << r.p90_ms << "\n";
  return os.str();
}

}  // namespace polarbev
