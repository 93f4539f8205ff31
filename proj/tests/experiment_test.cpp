#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "bilevel/experiment.hpp"

using namespace bilevel;
namespace fs = std::filesystem;

namespace {

json small_config(const std::string& mode) {
  return json{{"task", {{"kind", "translated_glyphs"}, {"samples_per_class", 16}, {"test_samples_per_class", 8}}},
              {"classifier", {{"kind", "mlp"}, {"widths", {12}}}},
              {"augmenter", {{"size", "small"}, {"translation_only", true}}},
              {"mode", mode},
              {"epochs", 2},
              {"batch_size", 16},
              {"seed", 3}};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("bilevel_experiment_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// metrics.csv without its last (wall time) column.
std::string strip_wall_time(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, out;
  while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + "\n";
  return out;
}

std::vector<std::string> metric_column(const std::string& csv, std::size_t col) {
  std::istringstream in(csv);
  std::string line;
  std::vector<std::string> out;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string cell;
    for (std::size_t c = 0; c <= col; ++c) std::getline(ls, cell, ',');
    out.push_back(cell);
  }
  return out;
}

}  // namespace

TEST(Config, DefaultsAndEcho) {
  const ExperimentConfig c = config_from_json(json::object());
  EXPECT_EQ(c.mode, Mode::none);
  EXPECT_EQ(c.epochs, 30u);
  EXPECT_EQ(c.hyper.K, 1u);
  EXPECT_EQ(c.hyper.J, 1u);
  EXPECT_DOUBLE_EQ(c.hyper.inner_lr, 0.05);
  EXPECT_DOUBLE_EQ(c.hyper.outer_lr, 1e-3);
  EXPECT_EQ(c.magnitude_grid, (std::vector<double>{0, 1, 2, 3, 4}));
  const json echo = config_to_json(config_from_json(small_config("learned")));
  EXPECT_EQ(config_to_json(config_from_json(echo)), echo);
  EXPECT_EQ(echo["augmenter"]["translation_only"], true);
}

TEST(Config, BlobTaskDefaultsToQuarterHueRange) {
  const ExperimentConfig c = config_from_json(json{{"task", {{"kind", "hue_shifted_blobs"}}}});
  EXPECT_DOUBLE_EQ(c.task.test_range, 0.25);
  EXPECT_EQ(c.train_options().classifier.channels, 3u);
}

TEST(Config, Rejections) {
  auto rejects = [](json j) { EXPECT_THROW(config_from_json(j), ConfigError) << j.dump(); };
  rejects(json{{"epochz", 3}});
  rejects(json{{"mode", "magic"}});
  rejects(json{{"mode", "learned"}});
  rejects(json{{"mode", "transform_invariant"}});
  rejects(json{{"epochs", "many"}});
  rejects(json{{"epochs", 0}});
  rejects(json{{"hypergrad", {{"K", 2}, {"J", 1}}}});
  rejects(json{{"mode", "validated_magnitude"}, {"magnitude_grid", json::array()}});
  rejects(json{{"augmenter", {{"color", true}}}});
  rejects(json{{"augmenter", {{"color_ops", {"sepia"}}}}});
  rejects(json{{"predefined", {{"hue", 0.1}}}});
}

TEST(Config, GlyphRangeBeyondMarginFailsAtGeneration) {
  ExperimentConfig c;
  c.task.test_range = 6;
  EXPECT_THROW(run_experiment(c), Error);
}

TEST(Modes, PredefinedWithZeroRangesEqualsNone) {
  json zero = small_config("predefined");
  zero["predefined"] = {{"translate_px", 0}, {"hue", 0}};
  const auto a = run_experiment(config_from_json(zero));
  const auto b = run_experiment(config_from_json(small_config("none")));
  EXPECT_EQ(strip_wall_time(metrics_csv(a.train.metrics)), strip_wall_time(metrics_csv(b.train.metrics)));
}

TEST(Modes, PredefinedLogsNoAugmenterStatistics) {
  const auto r = run_experiment(config_from_json(small_config("predefined")));
  for (const auto& m : r.train.metrics) {
    EXPECT_EQ(m.mean_abs_affine_delta, 0.0);
    EXPECT_EQ(m.mean_abs_color, 0.0);
  }
  EXPECT_TRUE(r.train.augmenter.tensors.empty());
}

TEST(Modes, ValidatedMagnitudeBookkeeping) {
  json j = small_config("validated_magnitude");
  j["magnitude_grid"] = {0};
  const auto single = run_experiment(config_from_json(j));
  const auto none = run_experiment(config_from_json(small_config("none")));
  EXPECT_EQ(single.cost_multiplier, 1u);
  EXPECT_EQ(single.selected_magnitude, 0.0);
  EXPECT_EQ(strip_wall_time(metrics_csv(single.train.metrics)), strip_wall_time(metrics_csv(none.train.metrics)));

  j["magnitude_grid"] = {0, 1, 3};
  const auto grid = run_experiment(config_from_json(j));
  EXPECT_EQ(grid.cost_multiplier, 3u);
  ASSERT_EQ(grid.grid.size(), 3u);
  const auto& best = *std::max_element(grid.grid.begin(), grid.grid.end(), [](const auto& a, const auto& b) {
    return a.val_accuracy < b.val_accuracy || (a.val_accuracy == b.val_accuracy && a.val_loss > b.val_loss);
  });
  EXPECT_EQ(*grid.selected_magnitude, best.magnitude);
  EXPECT_EQ(grid.train.test_accuracy, best.test_accuracy);
}

TEST(Modes, TransformInvariantInvokesAugmenterAtEval) {
  const auto r = run_experiment(config_from_json(small_config("transform_invariant")));
  EXPECT_GT(r.train.augmenter_eval_calls, 0u);
}

TEST(Metrics, CsvSchema) {
  const auto r = run_experiment(config_from_json(small_config("learned")));
  const std::string csv = metrics_csv(r.train.metrics);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), kMetricsHeader);
  const auto test_acc = metric_column(csv, 4);
  std::size_t present = 0;
  for (const auto& s : test_acc) present += !s.empty();
  EXPECT_EQ(present, 2u);
  std::size_t last_epoch = 0, last_iter = 0;
  for (std::size_t i = 0; i < r.train.metrics.size(); ++i) {
    const auto& m = r.train.metrics[i];
    EXPECT_GE(m.epoch, last_epoch);
    if (i > 0) {
      EXPECT_EQ(m.iteration, last_iter + 1);
    }
    last_epoch = m.epoch;
    last_iter = m.iteration;
  }
}

TEST(Artifacts, RunWritesDeterministicFiles) {
  const ExperimentConfig c = config_from_json(small_config("learned"));
  const fs::path d1 = scratch("det1"), d2 = scratch("det2");
  run_to_directory(c, d1);
  run_to_directory(c, d2);
  for (const char* f : {"metrics.csv", "summary.json", "weights.blvt"}) EXPECT_TRUE(fs::exists(d1 / f)) << f;
  EXPECT_EQ(strip_wall_time(read_file(d1 / "metrics.csv")), strip_wall_time(read_file(d2 / "metrics.csv")));
  EXPECT_EQ(read_file(d1 / "weights.blvt"), read_file(d2 / "weights.blvt"));
  const json s = read_summary(d1);
  EXPECT_EQ(s["schema_version"], kSummarySchemaVersion);
  EXPECT_EQ(s["mode"], "learned");
  EXPECT_EQ(s["config"], config_to_json(c));
  EXPECT_EQ(s["seed"], 3);
  const auto w = load_tensors((d1 / "weights.blvt").string());
  EXPECT_EQ(w.front().first, "classifier.fc0.weight");
  EXPECT_EQ(w.back().first, "augmenter.fc2.bias");
  fs::remove_all(d1);
  fs::remove_all(d2);
}

// Default glyph configuration, mode none, seed 1: 88 of 256 test images.
TEST(Regression, DefaultBaselineAccuracy) {
  const auto r = run_experiment(ExperimentConfig{});
  EXPECT_EQ(r.train.test_accuracy, 88.0 / 256.0);
  EXPECT_EQ(r.train.metrics.size(), 210u);
}

TEST(Summarize, SingleRunHasZeroStd) {
  json s{{"task", "translated_glyphs"}, {"mode", "none"}, {"test_accuracy", 0.5}, {"val_accuracy", 0.9},
         {"wall_time_ms", 10.0}, {"cost_multiplier", 1}};
  const SummaryTable t = summarize({s});
  ASSERT_EQ(t.rows.size(), 1u);
  EXPECT_EQ(t.rows[0].std_test, 0.0);
  EXPECT_EQ(t.rows[0].mean_test, 0.5);
  EXPECT_EQ(t.rows[0].relative_wall, 1.0);
}

TEST(Summarize, AggregatesSeedsPerMode) {
  std::vector<json> docs;
  const std::vector<double> acc{0.5, 0.6, 0.7, 0.8, 0.9};
  for (std::size_t i = 0; i < acc.size(); ++i) {
    docs.push_back({{"task", "translated_glyphs"}, {"mode", "learned"}, {"test_accuracy", acc[i]},
                    {"val_accuracy", 1.0}, {"wall_time_ms", 30.0}, {"cost_multiplier", 1}});
    docs.push_back({{"task", "translated_glyphs"}, {"mode", "none"}, {"test_accuracy", 0.3},
                    {"val_accuracy", 1.0}, {"wall_time_ms", 10.0}, {"cost_multiplier", 1}});
  }
  const SummaryTable t = summarize(docs);
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.rows[0].mode, "none");
  EXPECT_EQ(t.rows[1].mode, "learned");
  EXPECT_NEAR(t.rows[1].mean_test, (0.5 + 0.6 + 0.7 + 0.8 + 0.9) / 5.0, 1e-15);
  EXPECT_NEAR(t.rows[1].std_test, std::sqrt(0.025), 1e-12);
  EXPECT_NEAR(*t.rows[1].relative_wall, 3.0, 1e-12);
  EXPECT_NE(summary_text(t).find("learned"), std::string::npos);
  EXPECT_EQ(summary_csv(t).substr(0, 9), "task,mode");
}

TEST(Summarize, Errors) {
  json a{{"task", "translated_glyphs"}, {"mode", "none"}, {"test_accuracy", 0.5}, {"val_accuracy", 0.9},
         {"wall_time_ms", 1.0}, {"cost_multiplier", 1}};
  json b = a;
  b["task"] = "hue_shifted_blobs";
  EXPECT_THROW(summarize({a, b}), Error);
  EXPECT_THROW(summarize({}), Error);
  EXPECT_THROW(summarize_dirs({scratch("missing")}), Error);
}

#ifdef BILEVEL_CLI_PATH
namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(BILEVEL_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path write_config(const std::string& name, const std::string& text) {
  const fs::path p = fs::temp_directory_path() / name;
  std::ofstream(p) << text;
  return p;
}

}  // namespace

TEST(Cli, MalformedConfigExitsTwoWithoutArtifacts) {
  const fs::path out = scratch("cli_bad");
  const fs::path cfg = write_config("bilevel_bad.json", "{\"mode\": \"learned\", \"output_dir\": \"" + out.string() + "\"}");
  EXPECT_EQ(run_cli("run --config " + cfg.string()), 2);
  EXPECT_FALSE(fs::exists(out));
  const fs::path broken = write_config("bilevel_broken.json", "{ not json");
  EXPECT_EQ(run_cli("run --config " + broken.string() + " --out " + out.string()), 2);
  EXPECT_EQ(run_cli("run --config /nonexistent/config.json --out " + out.string()), 2);
  EXPECT_FALSE(fs::exists(out));
}

TEST(Cli, RunThenSummarize) {
  const fs::path out1 = scratch("cli_run1"), out2 = scratch("cli_run2");
  const fs::path cfg = write_config("bilevel_ok.json", small_config("none").dump());
  EXPECT_EQ(run_cli("run --config " + cfg.string() + " --out " + out1.string()), 0);
  EXPECT_EQ(run_cli("run --config " + cfg.string() + " --seed 4 --out " + out2.string()), 0);
  EXPECT_EQ(read_summary(out2)["seed"], 4);
  const fs::path csv = fs::temp_directory_path() / "bilevel_summary.csv";
  EXPECT_EQ(run_cli("summarize " + out1.string() + " " + out2.string() + " --csv " + csv.string()), 0);
  EXPECT_TRUE(fs::exists(csv));
  EXPECT_EQ(run_cli("summarize " + scratch("cli_missing").string()), 1);
  fs::remove_all(out1);
  fs::remove_all(out2);
}

TEST(Cli, OracleSuitePasses) { EXPECT_EQ(run_cli("oracle"), 0); }
#endif
