// bilevel: run augmentation experiments, compare runs, and execute the
// gradient and hypergradient self-checks.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bilevel/checks.hpp"
#include "bilevel/experiment.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kRuntimeFailure = 1;
constexpr int kConfigError = 2;

int print_checks(const std::vector<bilevel::checks::CheckResult>& results) {
  bool all = true;
  for (const auto& r : results) {
    std::printf("%-4s %-36s cases=%-4zu max_err=%.3e tol=%.0e\n", r.passed ? "ok" : "FAIL", r.name.c_str(), r.cases,
                r.max_error, r.tolerance);
    all = all && r.passed;
  }
  std::printf("%s\n", all ? "all checks passed" : "some checks FAILED");
  return all ? kOk : kRuntimeFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learned data augmentation by online bilevel optimization"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::uint64_t seed = 0;
  auto* run = app.add_subcommand("run", "Train one experiment and write metrics.csv, summary.json, weights.blvt");
  run->add_option("--config", config_path, "JSON experiment config")->required();
  auto* seed_opt = run->add_option("--seed", seed, "Override the config seed");
  run->add_option("--out", out_dir, "Override the output directory");

  std::vector<std::string> dirs;
  std::string csv_path;
  auto* summ = app.add_subcommand("summarize", "Compare completed runs (mean +- std per mode)");
  summ->add_option("dirs", dirs, "Run directories")->required();
  summ->add_option("--csv", csv_path, "Also write the table as CSV");

  bilevel::checks::GradcheckOptions gopt;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference checks for every op and transform");
  grad->add_option("--cases", gopt.cases, "Random cases per op");
  grad->add_option("--seed", gopt.seed, "Case generator seed");

  auto* oracle = app.add_subcommand("oracle", "Hypergradient oracle suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*run) {
      bilevel::ExperimentConfig cfg;
      try {
        cfg = bilevel::load_config(config_path);
        if (*seed_opt) cfg.seed = seed;
        if (!out_dir.empty()) cfg.output_dir = out_dir;
        cfg.validate();
      } catch (const bilevel::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigError;
      }
      const auto r = bilevel::run_to_directory(cfg, cfg.output_dir);
      std::printf("mode=%s seed=%llu test_accuracy=%.4f val_accuracy=%.4f", bilevel::to_string(cfg.mode),
                  static_cast<unsigned long long>(cfg.seed), r.train.test_accuracy, r.train.val_accuracy);
      if (r.selected_magnitude) std::printf(" selected_magnitude=%g cost=%zux", *r.selected_magnitude, r.cost_multiplier);
      std::printf(" -> %s\n", cfg.output_dir.c_str());
      return kOk;
    }
    if (*summ) {
      std::vector<std::filesystem::path> paths(dirs.begin(), dirs.end());
      const auto table = bilevel::summarize_dirs(paths);
      std::cout << bilevel::summary_text(table);
      if (!csv_path.empty()) {
        std::ofstream out(csv_path);
        out << bilevel::summary_csv(table);
        if (!out) throw bilevel::Error("failed to write " + csv_path);
      }
      return kOk;
    }
    if (*grad) return print_checks(bilevel::checks::gradcheck_suite(gopt));
    if (*oracle) return print_checks(bilevel::checks::oracle_suite());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeFailure;
  }
  return kOk;
}
