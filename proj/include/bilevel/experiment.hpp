#pragma once

// Experiment configuration, run execution for every augmentation strategy,
// on-disk artifacts (metrics.csv, summary.json, weights.blvt) and the
// cross-run comparison table.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bilevel/bilevel.hpp"
#include "bilevel/datasets.hpp"
#include "bilevel/networks.hpp"

namespace bilevel {

using nlohmann::json;

class ConfigError : public Error {
 public:
  using Error::Error;
};

inline constexpr int kSummarySchemaVersion = 1;
inline constexpr int kMetricsSchemaVersion = 1;

struct ExperimentConfig {
  SyntheticTaskSpec task;
  ClassifierSpec classifier;
  std::optional<AugmenterSpec> augmenter;
  HypergradConfig hyper;
  Mode mode = Mode::none;
  PredefinedRanges predefined;
  std::vector<double> magnitude_grid{0.0, 1.0, 2.0, 3.0, 4.0};
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double val_fraction = 0.2;
  std::uint64_t seed = 1;
  std::optional<FlipAxis> flip;
  std::string output_dir = "runs/default";

  /// Throws ConfigError on any inconsistency.
  void validate() const {
    try {
      task.validate();
      classifier.validate();
      hyper.validate();
      if (augmenter) augmenter->validate();
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
    if ((mode == Mode::learned || mode == Mode::transform_invariant) && !augmenter) {
      throw ConfigError(std::string("mode ") + to_string(mode) + " requires an augmenter section");
    }
    if (augmenter && augmenter->transforms.color && task.channels() != 3) {
      throw ConfigError("color transforms require a 3-channel task");
    }
    if (mode == Mode::validated_magnitude && magnitude_grid.empty()) throw ConfigError("magnitude_grid is empty");
    for (double m : magnitude_grid) {
      if (!(m >= 0.0)) throw ConfigError("magnitudes must be non-negative");
    }
    if (predefined.translate_px < 0.0 || predefined.hue < 0.0 || predefined.hue > 0.5) {
      throw ConfigError("predefined ranges must be non-negative (hue at most 0.5)");
    }
    if (predefined.hue > 0.0 && task.channels() != 3) throw ConfigError("hue jitter requires a 3-channel task");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0, 1)");
    if (output_dir.empty()) throw ConfigError("output_dir is empty");
  }

  /// Options for one training run of the configured mode.
  TrainOptions train_options() const {
    TrainOptions o;
    o.mode = mode;
    o.classifier = classifier;
    o.classifier.channels = task.channels();
    o.classifier.height = o.classifier.width = task.image_size;
    o.classifier.num_classes = task.num_classes;
    if (augmenter) o.augmenter = *augmenter;
    o.hyper = hyper;
    o.predefined = predefined;
    o.epochs = epochs;
    o.batch_size = batch_size;
    o.val_fraction = val_fraction;
    o.seed = seed;
    o.flip = flip;
    return o;
  }
};

namespace detail {

template <typename E>
E parse_enum(const json& j, const std::string& key, const std::vector<std::pair<std::string, E>>& names) {
  const auto s = j.get<std::string>();
  for (const auto& [n, v] : names)
    if (n == s) return v;
  throw ConfigError("unknown value '" + s + "' for " + key);
}

template <typename E>
std::string enum_name(E v, const std::vector<std::pair<std::string, E>>& names) {
  for (const auto& [n, e] : names)
    if (e == v) return n;
  return "?";
}

inline const std::vector<std::pair<std::string, Mode>>& mode_names() {
  static const std::vector<std::pair<std::string, Mode>> v{{"none", Mode::none},
                                                           {"predefined", Mode::predefined},
                                                           {"transform_invariant", Mode::transform_invariant},
                                                           {"validated_magnitude", Mode::validated_magnitude},
                                                           {"learned", Mode::learned}};
  return v;
}
inline const std::vector<std::pair<std::string, TaskKind>>& task_names() {
  static const std::vector<std::pair<std::string, TaskKind>> v{{"translated_glyphs", TaskKind::translated_glyphs},
                                                               {"hue_shifted_blobs", TaskKind::hue_shifted_blobs}};
  return v;
}
inline const std::vector<std::pair<std::string, ClassifierKind>>& classifier_names() {
  static const std::vector<std::pair<std::string, ClassifierKind>> v{{"mlp", ClassifierKind::mlp},
                                                                     {"small_cnn", ClassifierKind::small_cnn}};
  return v;
}
inline const std::vector<std::pair<std::string, AugmenterSize>>& size_names() {
  static const std::vector<std::pair<std::string, AugmenterSize>> v{
      {"small", AugmenterSize::small}, {"medium", AugmenterSize::medium}, {"large", AugmenterSize::large}};
  return v;
}
inline const std::vector<std::pair<std::string, OuterOptimizerKind>>& optimizer_names() {
  static const std::vector<std::pair<std::string, OuterOptimizerKind>> v{{"adam", OuterOptimizerKind::adam},
                                                                         {"sgd", OuterOptimizerKind::sgd}};
  return v;
}
inline const std::vector<std::pair<std::string, FlipAxis>>& flip_names() {
  static const std::vector<std::pair<std::string, FlipAxis>> v{{"horizontal", FlipAxis::horizontal},
                                                               {"vertical", FlipAxis::vertical}};
  return v;
}
inline const std::array<const char*, 4> kColorOpNames{"hue", "saturation", "contrast", "brightness"};

/// Rejects keys outside `allowed` so that typos never silently fall back to
/// defaults.
inline void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, v] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; })) {
      throw ConfigError("unknown key '" + k + "' in " + where);
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline ExperimentConfig config_from_json(const json& j) {
  using namespace detail;
  ExperimentConfig c;
  try {
    check_keys(j, "config",
               {"task", "classifier", "augmenter", "hypergrad", "mode", "predefined", "magnitude_grid", "epochs",
                "batch_size", "val_fraction", "seed", "flip", "output_dir"});
    if (j.contains("task")) {
      const auto& t = j.at("task");
      check_keys(t, "task",
                 {"kind", "image_size", "num_classes", "train_range", "test_range", "samples_per_class",
                  "test_samples_per_class", "noise_sigma"});
      if (t.contains("kind")) c.task.task = parse_enum(t.at("kind"), "task.kind", task_names());
      if (c.task.task == TaskKind::hue_shifted_blobs) c.task.test_range = 0.25;
      read(t, "image_size", c.task.image_size);
      read(t, "num_classes", c.task.num_classes);
      read(t, "train_range", c.task.train_range);
      read(t, "test_range", c.task.test_range);
      read(t, "samples_per_class", c.task.samples_per_class);
      read(t, "test_samples_per_class", c.task.test_samples_per_class);
      read(t, "noise_sigma", c.task.noise_sigma);
    }
    if (j.contains("classifier")) {
      const auto& t = j.at("classifier");
      check_keys(t, "classifier", {"kind", "widths"});
      if (t.contains("kind")) c.classifier.kind = parse_enum(t.at("kind"), "classifier.kind", classifier_names());
      if (c.classifier.kind == ClassifierKind::small_cnn) c.classifier.widths = {8, 16};
      read(t, "widths", c.classifier.widths);
    }
    if (j.contains("augmenter")) {
      const auto& t = j.at("augmenter");
      check_keys(t, "augmenter",
                 {"size", "affine", "translation_only", "color", "color_ops", "dropout", "bound_linear",
                  "bound_translation"});
      AugmenterSpec a;
      if (t.contains("size")) a.size = parse_enum(t.at("size"), "augmenter.size", size_names());
      read(t, "affine", a.transforms.affine);
      read(t, "translation_only", a.transforms.translation_only);
      read(t, "color", a.transforms.color);
      if (t.contains("color_ops")) {
        a.transforms.color_ops = {false, false, false, false};
        for (const auto& op : t.at("color_ops")) {
          const auto s = op.get<std::string>();
          const auto it = std::find(kColorOpNames.begin(), kColorOpNames.end(), s);
          if (it == kColorOpNames.end()) throw ConfigError("unknown color op '" + s + "'");
          a.transforms.color_ops[static_cast<std::size_t>(it - kColorOpNames.begin())] = true;
        }
      }
      read(t, "dropout", a.dropout_rate);
      read(t, "bound_linear", a.bounds.affine_linear);
      read(t, "bound_translation", a.bounds.affine_translation);
      if (!(a.dropout_rate >= 0.0 && a.dropout_rate < 1.0)) throw ConfigError("augmenter.dropout must lie in [0, 1)");
      c.augmenter = a;
    }
    if (j.contains("hypergrad")) {
      const auto& t = j.at("hypergrad");
      check_keys(t, "hypergrad",
                 {"K", "J", "inner_lr", "outer_lr", "outer_optimizer", "beta1", "beta2", "eps", "weight_decay",
                  "clip_norm", "freeze_final_layer"});
      read(t, "K", c.hyper.K);
      read(t, "J", c.hyper.J);
      read(t, "inner_lr", c.hyper.inner_lr);
      read(t, "outer_lr", c.hyper.outer_lr);
      if (t.contains("outer_optimizer")) {
        c.hyper.outer_optimizer = parse_enum(t.at("outer_optimizer"), "hypergrad.outer_optimizer", optimizer_names());
      }
      read(t, "beta1", c.hyper.beta1);
      read(t, "beta2", c.hyper.beta2);
      read(t, "eps", c.hyper.eps);
      read(t, "weight_decay", c.hyper.weight_decay);
      read(t, "clip_norm", c.hyper.clip_norm);
      read(t, "freeze_final_layer", c.hyper.freeze_final_layer);
    }
    if (j.contains("mode")) c.mode = parse_enum(j.at("mode"), "mode", mode_names());
    if (j.contains("predefined")) {
      const auto& t = j.at("predefined");
      check_keys(t, "predefined", {"translate_px", "hue"});
      read(t, "translate_px", c.predefined.translate_px);
      read(t, "hue", c.predefined.hue);
    }
    read(j, "magnitude_grid", c.magnitude_grid);
    read(j, "epochs", c.epochs);
    read(j, "batch_size", c.batch_size);
    read(j, "val_fraction", c.val_fraction);
    read(j, "seed", c.seed);
    if (j.contains("flip") && !j.at("flip").is_null()) c.flip = parse_enum(j.at("flip"), "flip", flip_names());
    read(j, "output_dir", c.output_dir);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

/// Complete schema echo, including every defaulted field.
inline json config_to_json(const ExperimentConfig& c) {
  using namespace detail;
  json j;
  j["task"] = {{"kind", to_string(c.task.task)},
               {"image_size", c.task.image_size},
               {"num_classes", c.task.num_classes},
               {"train_range", c.task.train_range},
               {"test_range", c.task.test_range},
               {"samples_per_class", c.task.samples_per_class},
               {"test_samples_per_class", c.task.test_samples_per_class},
               {"noise_sigma", c.task.noise_sigma}};
  j["classifier"] = {{"kind", enum_name(c.classifier.kind, classifier_names())}, {"widths", c.classifier.widths}};
  if (c.augmenter) {
    const auto& a = *c.augmenter;
    json ops = json::array();
    for (std::size_t k = 0; k < 4; ++k)
      if (a.transforms.color_ops[k]) ops.push_back(kColorOpNames[k]);
    j["augmenter"] = {{"size", to_string(a.size)},
                      {"affine", a.transforms.affine},
                      {"translation_only", a.transforms.translation_only},
                      {"color", a.transforms.color},
                      {"color_ops", ops},
                      {"dropout", a.dropout_rate},
                      {"bound_linear", a.bounds.affine_linear},
                      {"bound_translation", a.bounds.affine_translation}};
  }
  j["hypergrad"] = {{"K", c.hyper.K},
                    {"J", c.hyper.J},
                    {"inner_lr", c.hyper.inner_lr},
                    {"outer_lr", c.hyper.outer_lr},
                    {"outer_optimizer", enum_name(c.hyper.outer_optimizer, optimizer_names())},
                    {"beta1", c.hyper.beta1},
                    {"beta2", c.hyper.beta2},
                    {"eps", c.hyper.eps},
                    {"weight_decay", c.hyper.weight_decay},
                    {"clip_norm", c.hyper.clip_norm},
                    {"freeze_final_layer", c.hyper.freeze_final_layer}};
  j["mode"] = to_string(c.mode);
  j["predefined"] = {{"translate_px", c.predefined.translate_px}, {"hue", c.predefined.hue}};
  j["magnitude_grid"] = c.magnitude_grid;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["val_fraction"] = c.val_fraction;
  j["seed"] = c.seed;
  j["flip"] = c.flip ? json(enum_name(*c.flip, flip_names())) : json(nullptr);
  j["output_dir"] = c.output_dir;
  return j;
}

struct GridPoint {
  double magnitude = 0.0;
  double val_accuracy = 0.0;
  double val_loss = 0.0;
  double test_accuracy = 0.0;
};

struct ExperimentResult {
  TrainResult train;  // the reported run (the selected one for validated_magnitude)
  std::size_t cost_multiplier = 1;
  std::optional<double> selected_magnitude;
  std::vector<GridPoint> grid;
  double total_wall_time_ms = 0.0;
};

/// Applies one magnitude of the validated-magnitude search: pixels of
/// translation on translated_glyphs, hue range on hue_shifted_blobs.
inline TrainOptions with_magnitude(TrainOptions o, TaskKind task, double m) {
  o.mode = Mode::validated_magnitude;
  if (task == TaskKind::translated_glyphs) {
    o.predefined = {m, 0.0};
  } else {
    o.predefined = {0.0, m};
  }
  return o;
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const Dataset& train_set, const Dataset& test_set) {
  cfg.validate();
  ExperimentResult r;
  const TrainOptions base = cfg.train_options();
  if (cfg.mode != Mode::validated_magnitude) {
    r.train = train(base, train_set, test_set);
    r.total_wall_time_ms = r.train.wall_time_ms;
    return r;
  }
  // Best validation accuracy; ties go to lower validation loss, then to the
  // smaller magnitude.
  std::optional<std::size_t> best;
  for (double m : cfg.magnitude_grid) {
    TrainResult t = train(with_magnitude(base, cfg.task.task, m), train_set, test_set);
    r.total_wall_time_ms += t.wall_time_ms;
    r.grid.push_back({m, t.val_accuracy, t.val_loss, t.test_accuracy});
    const std::size_t k = r.grid.size() - 1;
    const bool better = !best || t.val_accuracy > r.grid[*best].val_accuracy ||
                        (t.val_accuracy == r.grid[*best].val_accuracy && t.val_loss < r.grid[*best].val_loss);
    if (better) {
      best = k;
      r.train = std::move(t);
    }
  }
  r.selected_magnitude = r.grid[*best].magnitude;
  r.cost_multiplier = cfg.magnitude_grid.size();
  return r;
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto [tr, te] = generate(cfg.task, cfg.seed);
  return run_experiment(cfg, tr, te);
}

namespace detail {

inline std::string fmt(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace detail

inline const char* kMetricsHeader =
    "epoch,iteration,train_loss,val_loss,test_accuracy,mean_abs_affine_delta,mean_abs_color,wall_time_ms";

/// Shortest round-trip decimal for every value; absent values are empty.
inline std::string metrics_csv(const std::vector<MetricsRecord>& rows) {
  using detail::fmt;
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& r : rows) {
    out += std::to_string(r.epoch) + "," + std::to_string(r.iteration) + "," + fmt(r.train_loss) + "," +
           (r.val_loss ? fmt(*r.val_loss) : "") + "," + (r.test_accuracy ? fmt(*r.test_accuracy) : "") + "," +
           fmt(r.mean_abs_affine_delta) + "," + fmt(r.mean_abs_color) + "," + fmt(r.wall_time_ms) + "\n";
  }
  return out;
}

inline json summary_json(const ExperimentConfig& cfg, const ExperimentResult& r) {
  json j;
  j["schema_version"] = kSummarySchemaVersion;
  j["metrics_schema_version"] = kMetricsSchemaVersion;
  j["task"] = to_string(cfg.task.task);
  j["mode"] = to_string(cfg.mode);
  j["seed"] = cfg.seed;
  j["config"] = config_to_json(cfg);
  j["dataset"] = manifest(cfg.task, cfg.seed);
  j["test_accuracy"] = r.train.test_accuracy;
  j["val_accuracy"] = r.train.val_accuracy;
  j["val_loss"] = r.train.val_loss;
  j["epoch_test_accuracy"] = r.train.epoch_test_accuracy;
  j["cost_multiplier"] = r.cost_multiplier;
  j["inner_steps"] = r.train.inner_steps;
  j["outer_steps"] = r.train.outer_steps;
  j["augmenter_eval_calls"] = r.train.augmenter_eval_calls;
  j["wall_time_ms"] = r.total_wall_time_ms;
  if (r.selected_magnitude) {
    j["selected_magnitude"] = *r.selected_magnitude;
    json g = json::array();
    for (const auto& p : r.grid) {
      g.push_back({{"magnitude", p.magnitude},
                   {"val_accuracy", p.val_accuracy},
                   {"val_loss", p.val_loss},
                   {"test_accuracy", p.test_accuracy}});
    }
    j["grid"] = g;
  }
  return j;
}

inline NamedTensors weight_entries(const TrainResult& r) {
  NamedTensors out;
  for (std::size_t i = 0; i < r.classifier.size(); ++i)
    out.emplace_back("classifier." + r.classifier.names[i], detach(r.classifier.tensors[i]));
  for (std::size_t i = 0; i < r.augmenter.size(); ++i)
    out.emplace_back("augmenter." + r.augmenter.names[i], detach(r.augmenter.tensors[i]));
  return out;
}

/// Runs the experiment and writes metrics.csv, summary.json and weights.blvt
/// into `dir` (created if needed).
inline ExperimentResult run_to_directory(const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  cfg.validate();
  ExperimentResult r = run_experiment(cfg);
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "metrics.csv", std::ios::binary);
    out << metrics_csv(r.train.metrics);
    if (!out) throw Error("failed to write " + (dir / "metrics.csv").string());
  }
  {
    std::ofstream out(dir / "summary.json", std::ios::binary);
    out << summary_json(cfg, r).dump(2) << "\n";
    if (!out) throw Error("failed to write " + (dir / "summary.json").string());
  }
  save_tensors((dir / "weights.blvt").string(), weight_entries(r.train));
  return r;
}

struct SummaryRow {
  std::string mode;
  std::size_t runs = 0;
  double mean_test = 0.0;
  double std_test = 0.0;
  double mean_val = 0.0;
  double cost_multiplier = 0.0;
  double mean_wall_ms = 0.0;
  std::optional<double> relative_wall;  // against mode none, when present
};

struct SummaryTable {
  std::string task;
  std::vector<SummaryRow> rows;
};

inline double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

/// Aggregates summary.json documents per mode: mean and sample standard
/// deviation of test accuracy over seeds, search multiplier and wall time
/// relative to the unaugmented baseline.
inline SummaryTable summarize(const std::vector<json>& summaries) {
  if (summaries.empty()) throw Error("summarize: no runs given");
  SummaryTable t;
  t.task = summaries.front().at("task").get<std::string>();
  struct Acc {
    std::vector<double> test, val, wall, cost;
  };
  std::map<Mode, Acc> by_mode;
  for (const auto& s : summaries) {
    if (s.at("task").get<std::string>() != t.task) {
      throw Error("summarize: mixed tasks (" + t.task + " and " + s.at("task").get<std::string>() + ")");
    }
    const Mode m = detail::parse_enum(s.at("mode"), "mode", detail::mode_names());
    auto& a = by_mode[m];
    a.test.push_back(s.at("test_accuracy").get<double>());
    a.val.push_back(s.at("val_accuracy").get<double>());
    a.wall.push_back(s.at("wall_time_ms").get<double>());
    a.cost.push_back(s.at("cost_multiplier").get<double>());
  }
  auto mean = [](const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  std::optional<double> base_wall;
  if (by_mode.count(Mode::none)) base_wall = mean(by_mode.at(Mode::none).wall);
  for (const auto& [m, a] : by_mode) {
    SummaryRow r;
    r.mode = to_string(m);
    r.runs = a.test.size();
    r.mean_test = mean(a.test);
    r.std_test = sample_std(a.test);
    r.mean_val = mean(a.val);
    r.cost_multiplier = mean(a.cost);
    r.mean_wall_ms = mean(a.wall);
    if (base_wall && *base_wall > 0.0) r.relative_wall = r.mean_wall_ms / *base_wall;
    t.rows.push_back(r);
  }
  return t;
}

inline json read_summary(const std::filesystem::path& dir) {
  const auto p = dir / "summary.json";
  std::ifstream in(p);
  if (!in) throw Error("missing " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error("unreadable " + p.string() + ": " + e.what());
  }
}

inline SummaryTable summarize_dirs(const std::vector<std::filesystem::path>& dirs) {
  std::vector<json> docs;
  for (const auto& d : dirs) docs.push_back(read_summary(d));
  return summarize(docs);
}

inline std::string summary_csv(const SummaryTable& t) {
  using detail::fmt;
  std::string out = "task,mode,runs,mean_test_accuracy,std_test_accuracy,mean_val_accuracy,cost_multiplier,"
                    "mean_wall_time_ms,relative_wall_time\n";
  for (const auto& r : t.rows) {
    out += t.task + "," + r.mode + "," + std::to_string(r.runs) + "," + fmt(r.mean_test) + "," + fmt(r.std_test) +
           "," + fmt(r.mean_val) + "," + fmt(r.cost_multiplier) + "," + fmt(r.mean_wall_ms) + "," +
           (r.relative_wall ? fmt(*r.relative_wall) : "") + "\n";
  }
  return out;
}

inline std::string summary_text(const SummaryTable& t) {
  std::ostringstream os;
  char line[256];
  os << "task: " << t.task << "\n";
  std::snprintf(line, sizeof line, "%-22s %5s %18s %9s %8s %10s\n", "mode", "runs", "test acc (%)", "val acc",
                "search", "rel. time");
  os << line;
  for (const auto& r : t.rows) {
    char rel[32] = "-";
    if (r.relative_wall) std::snprintf(rel, sizeof rel, "%.2fx", *r.relative_wall);
    std::snprintf(line, sizeof line, "%-22s %5zu %10.2f +- %5.2f %9.2f %7.0fx %10s\n", r.mode.c_str(), r.runs,
                  100.0 * r.mean_test, 100.0 * r.std_test, 100.0 * r.mean_val, r.cost_multiplier, rel);
    os << line;
  }
  return os.str();
}

}  // namespace bilevel
