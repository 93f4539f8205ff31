// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any FAIL.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "bilevel/checks.hpp"
#include "bilevel/experiment.hpp"

using namespace bilevel;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool passed = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const Outcome& o, double secs) {
  std::printf("%s criterion %d %s: %s (%.1f s)\n", o.passed ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str(),
              secs);
  std::fflush(stdout);
  if (!o.passed) ++failures;
}

void run(int id, const std::string& name, const std::function<Outcome()>& fn) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  report(id, name, o, seconds_since(t0));
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

const std::vector<std::uint64_t> kSeeds{1, 2, 3, 4, 5};

json glyph_config(const std::string& mode) {
  json j{{"task", {{"kind", "translated_glyphs"}, {"image_size", 16}, {"num_classes", 4}, {"test_range", 3.0}}},
         {"classifier", {{"kind", "mlp"}, {"widths", {64}}}},
         {"mode", mode},
         {"predefined", {{"translate_px", 3.0}}},
         {"magnitude_grid", {0, 1, 2, 3, 4}}};
  if (mode == "learned" || mode == "transform_invariant") j["augmenter"] = {{"size", "small"}, {"affine", true}};
  return j;
}

json blob_config(const std::string& mode) {
  json j{{"task", {{"kind", "hue_shifted_blobs"}, {"image_size", 16}, {"num_classes", 4}}},
         {"classifier", {{"kind", "mlp"}, {"widths", {64}}}},
         {"mode", mode}};
  if (mode == "learned") {
    j["augmenter"] = {{"size", "small"}, {"affine", false}, {"color", true}, {"color_ops", {"hue"}}};
  }
  return j;
}

struct SeedRuns {
  std::vector<ExperimentResult> runs;
  double mean_test() const {
    double s = 0.0;
    for (const auto& r : runs) s += r.train.test_accuracy;
    return s / static_cast<double>(runs.size());
  }
  double mean_wall() const {
    double s = 0.0;
    for (const auto& r : runs) s += r.total_wall_time_ms;
    return s / static_cast<double>(runs.size());
  }
};

SeedRuns run_seeds(json cfg) {
  SeedRuns out;
  for (auto seed : kSeeds) {
    cfg["seed"] = seed;
    out.runs.push_back(run_experiment(config_from_json(cfg)));
    std::printf("  %-20s seed %llu test %.4f (%.1f s)\n", cfg["mode"].get<std::string>().c_str(),
                static_cast<unsigned long long>(seed), out.runs.back().train.test_accuracy,
                out.runs.back().total_wall_time_ms / 1000.0);
    std::fflush(stdout);
  }
  return out;
}

std::map<std::string, SeedRuns> glyph_runs;

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  const auto results = checks::gradcheck_suite();
  const double secs = seconds_since(t0);
  double worst = 0.0;
  std::size_t min_cases = SIZE_MAX;
  std::string failed;
  std::size_t first_order = 0;
  for (const auto& r : results) {
    worst = std::max(worst, r.max_error);
    if (r.name.rfind("d2:", 0) != 0) {
      min_cases = std::min(min_cases, r.cases);
      ++first_order;
    }
    if (!r.passed) failed += " " + r.name + "=" + fmt("%.2e", r.max_error);
  }
  const bool ok = failed.empty() && min_cases >= 100 && secs <= 120.0;
  return {ok, std::to_string(first_order) + " ops x " + std::to_string(min_cases) + " cases, worst rel " +
                  fmt("%.2e", worst) + " (tol 1e-4), " + fmt("%.1f s", secs) + " (limit 120 s)" +
                  (failed.empty() ? "" : ", failing:" + failed)};
}

Outcome quadratic_oracle() {
  const auto t0 = Clock::now();
  const checks::QuadraticProblem q;
  const double g = windowed_hypergrad(q.problem(), 1, 1)[0].item();
  const double err = std::abs(g - (-0.19));
  const double secs = seconds_since(t0);
  return {err <= 1e-12 && secs < 1.0, "hypergradient " + fmt("%.17g", g) + ", |err| " + fmt("%.2e", err) + " (tol 1e-12)"};
}

Outcome truncation_equivalence() {
  const auto t0 = Clock::now();
  const auto lp = checks::linear_model_problem();
  double trunc = 0.0, fd = 0.0;
  for (std::size_t t = 1; t <= 5; ++t) {
    const auto full = full_unroll_hypergrad(lp, t);
    const auto win = windowed_hypergrad(lp, t, t);
    const auto num = checks::finite_diff_hypergrad(lp, t);
    trunc = std::max(trunc, checks::max_abs_diff(full, win));
    fd = std::max({fd, checks::max_rel(full, num), checks::max_rel(win, num)});
  }
  const double secs = seconds_since(t0);
  return {trunc <= 1e-10 && fd <= 1e-6 && secs < 30.0,
          "max |truncated - full| " + fmt("%.2e", trunc) + " (tol 1e-10), max rel vs FD " + fmt("%.2e", fd) +
              " (tol 1e-6)"};
}

Outcome identity_contract() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (auto size : {AugmenterSize::small, AugmenterSize::medium, AugmenterSize::large}) {
    AugmenterSpec s;
    s.size = size;
    Rng rng(static_cast<std::uint64_t>(size) + 1, 0);
    Tape tape;
    const ParamSet w = init_weights(s, rng, tape);
    const Tensor img = checks::random_tensor({8, 1, 16, 16}, rng, 0.0, 1.0);
    const AugmentParams p = augmenter_forward(s, sample_noise(8, s.noise_dim(), rng), w, true, rng);
    const Tensor out = apply_augment(img, p.affine, p.color, s.transforms.flags());
    for (std::size_t i = 0; i < img.size(); ++i) worst = std::max(worst, std::abs(out[i] - img[i]));
  }

  json frozen = glyph_config("learned");
  frozen["hypergrad"] = {{"freeze_final_layer", true}};
  frozen["epochs"] = 10;
  json base = glyph_config("none");
  base["epochs"] = 10;
  const auto a = run_experiment(config_from_json(frozen)).train;
  const auto b = run_experiment(config_from_json(base)).train;
  bool bitwise = a.metrics.size() == b.metrics.size() && a.test_accuracy == b.test_accuracy;
  for (std::size_t i = 0; bitwise && i < a.metrics.size(); ++i) {
    bitwise = std::memcmp(&a.metrics[i].train_loss, &b.metrics[i].train_loss, sizeof(double)) == 0;
  }
  for (std::size_t i = 0; bitwise && i < a.classifier.size(); ++i) {
    const auto& x = a.classifier.tensors[i].values();
    const auto& y = b.classifier.tensors[i].values();
    bitwise = x.size() == y.size() && std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) == 0;
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-10 && bitwise && secs < 120.0,
          "zero-init max |out - in| " + fmt("%.2e", worst) + " (tol 1e-10), frozen learned vs none " +
              (bitwise ? "bitwise identical" : "DIFFERENT") + " over " + std::to_string(a.metrics.size()) + " steps"};
}

Outcome invariance_recovery() {
  const auto t0 = Clock::now();
  for (const char* mode : {"none", "predefined", "transform_invariant", "learned", "validated_magnitude"}) {
    glyph_runs[mode] = run_seeds(glyph_config(mode));
  }
  const double core_secs = [&] {
    double ms = 0.0;
    for (const char* mode : {"none", "predefined", "transform_invariant", "learned"})
      for (const auto& r : glyph_runs[mode].runs) ms += r.total_wall_time_ms;
    return ms / 1000.0;
  }();
  const double none = 100 * glyph_runs["none"].mean_test(), pre = 100 * glyph_runs["predefined"].mean_test();
  const double ti = 100 * glyph_runs["transform_invariant"].mean_test(), learned = 100 * glyph_runs["learned"].mean_test();
  const double vm = 100 * glyph_runs["validated_magnitude"].mean_test();
  std::string selected;
  for (const auto& r : glyph_runs["validated_magnitude"].runs) selected += fmt(" %g", r.selected_magnitude.value_or(-1));
  const double wall_ratio = glyph_runs["learned"].mean_wall() / glyph_runs["none"].mean_wall();

  const bool beats = learned >= none + 10.0;
  const bool near_oracle = learned >= pre - 3.0;
  const bool ordering = none < ti && ti < learned;
  const bool budget = core_secs <= 900.0;
  std::printf("  glyph means (%%): none %.2f, transform_invariant %.2f, learned %.2f, predefined %.2f, "
              "validated_magnitude %.2f (selected px:%s), learned/none wall %.2fx, %.0f s for the four modes\n",
              none, ti, learned, pre, vm, selected.c_str(), wall_ratio, core_secs);
  (void)t0;
  return {beats && near_oracle && ordering && budget,
          "learned - none " + fmt("%+.2f", learned - none) + " pts (need >= +10), predefined - learned " +
              fmt("%+.2f", pre - learned) + " pts (need <= 3), ordering none < transform_invariant < learned " +
              (ordering ? "holds" : "violated") + ", " + fmt("%.0f s", core_secs) + " (limit 900 s)"};
}

Outcome color_task() {
  const auto none = run_seeds(blob_config("none"));
  const auto learned = run_seeds(blob_config("learned"));
  double secs = 0.0;
  for (const auto* s : {&none, &learned})
    for (const auto& r : s->runs) secs += r.total_wall_time_ms / 1000.0;
  const double gap = 100 * (learned.mean_test() - none.mean_test());
  return {gap >= 8.0 && secs <= 900.0,
          "none " + fmt("%.2f", 100 * none.mean_test()) + "%, learned hue " + fmt("%.2f", 100 * learned.mean_test()) +
              "%, gap " + fmt("%+.2f", gap) + " pts (need >= +8), " + fmt("%.0f s", secs) + " (limit 900 s)"};
}

Outcome schedule_diagnostic() {
  const auto& runs = glyph_runs["learned"].runs;
  if (runs.empty()) return {false, "criterion 5 runs unavailable"};
  const std::size_t n = runs.front().train.metrics.size();
  std::vector<double> curve(n, 0.0);
  for (const auto& r : runs) {
    if (r.train.metrics.size() != n) return {false, "runs have different lengths"};
    for (std::size_t i = 0; i < n; ++i) curve[i] += r.train.metrics[i].mean_abs_affine_delta / static_cast<double>(runs.size());
  }
  const std::size_t fifth = std::max<std::size_t>(1, n / 5);
  double early = 0.0, late = 0.0;
  for (std::size_t i = 0; i < fifth; ++i) {
    early += curve[i] / static_cast<double>(fifth);
    late += curve[n - fifth + i] / static_cast<double>(fifth);
  }
  return {early >= late, "seed-averaged mean |affine delta| first 20% " + fmt("%.4e", early) + ", last 20% " +
                             fmt("%.4e", late) + " over " + std::to_string(n) + " iterations"};
}

std::string without_wall_column(const std::string& csv) {
  std::string out;
  std::size_t pos = 0;
  while (pos < csv.size()) {
    const std::size_t end = csv.find('\n', pos);
    const std::string line = csv.substr(pos, end - pos);
    out += line.substr(0, line.rfind(',')) + "\n";
    pos = end == std::string::npos ? csv.size() : end + 1;
  }
  return out;
}

Outcome determinism_and_format() {
  json cfg = glyph_config("learned");
  cfg["epochs"] = 3;
  cfg["flip"] = "horizontal";
  const auto c = config_from_json(cfg);
  const auto a = run_experiment(c), b = run_experiment(c);
  const bool same_csv = without_wall_column(metrics_csv(a.train.metrics)) == without_wall_column(metrics_csv(b.train.metrics));

  NamedTensors weights = weight_entries(a.train);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  weights.emplace_back("specials", Tensor::constant({5}, {nan, -0.0, INFINITY, -INFINITY, 4.9e-324}));
  const auto path = std::filesystem::temp_directory_path() / "bilevel_acceptance.blvt";
  save_tensors(path.string(), weights);
  const NamedTensors back = load_tensors(path.string());
  std::filesystem::remove(path);
  bool bitwise = back.size() == weights.size();
  for (std::size_t i = 0; bitwise && i < back.size(); ++i) {
    const auto& x = weights[i].second.values();
    const auto& y = back[i].second.values();
    bitwise = back[i].first == weights[i].first && back[i].second.shape() == weights[i].second.shape() &&
              x.size() == y.size() && std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) == 0;
  }
  return {same_csv && bitwise, std::string("metrics.csv ") + (same_csv ? "byte-identical" : "DIFFERS") +
                                   " across repeated runs, BLVT round trip of " + std::to_string(weights.size()) +
                                   " tensors " + (bitwise ? "bitwise" : "NOT bitwise")};
}

}  // namespace

int main() {
  run(1, "gradient suite", gradient_suite);
  run(2, "quadratic hypergradient oracle", quadratic_oracle);
  run(3, "truncation/unroll equivalence", truncation_equivalence);
  run(4, "identity contract", identity_contract);
  run(5, "invariance recovery (translated_glyphs)", invariance_recovery);
  run(6, "color task (hue_shifted_blobs)", color_task);
  run(7, "schedule diagnostic", schedule_diagnostic);
  run(8, "determinism and format", determinism_and_format);
  std::printf("%d criterion(s) failed\n", failures);
  return failures == 0 ? 0 : 1;
}
