// Command-line front end: builds separation matrices, runs the training /
// OOD / open-set protocols from a JSON config, and renders result reports.
#include <cstdio>
#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "maxsep/experiment.hpp"
#include "maxsep/separation.hpp"

namespace {

int cmd_matrix(std::size_t classes, const std::string& out_path, double tolerance) {
  const maxsep::SeparationMatrix p = maxsep::build_separation_matrix(classes);
  const maxsep::VerificationReport rep = maxsep::verify_separation(p, tolerance);
  if (!out_path.empty()) maxsep::save_matrix(p, out_path);
  std::printf("classes               %zu\n", p.num_classes);
  std::printf("embedding dim         %zu\n", p.embed_dim);
  std::printf("max norm deviation    %.3e\n", rep.max_norm_deviation);
  std::printf("max cosine deviation  %.3e\n", rep.max_cosine_deviation);
  std::printf("sum vector norm       %.3e\n", rep.sum_vector_norm);
  std::printf("verification          %s (tolerance %.3e)\n", rep.passed ? "passed" : "FAILED",
              tolerance);
  if (!out_path.empty()) std::printf("written to            %s\n", out_path.c_str());
  return rep.passed ? 0 : 1;
}

maxsep::ExperimentConfig load_with_overrides(const std::string& config_path,
                                             const std::vector<std::uint64_t>& seed_override) {
  maxsep::ExperimentConfig cfg = maxsep::load_config(config_path);
  if (!seed_override.empty()) cfg.seeds = seed_override;
  return cfg;
}

void print_runs(const std::vector<maxsep::RunResult>& results) {
  for (const maxsep::RunResult& r : results)
    std::printf("seed %llu  %-22s factor %-6s test acc %.4f  afs %.4f\n",
                static_cast<unsigned long long>(r.seed), maxsep::head_kind_name(r.head),
                maxsep::detail::format_double(r.imbalance_factor).c_str(), r.final_test_acc,
                r.afs);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"maximally separated class vectors: matrix construction and training protocols"};
  app.require_subcommand(1);

  // matrix
  std::size_t classes = 10;
  std::string matrix_out;
  double tolerance = 1e-9;
  CLI::App* matrix = app.add_subcommand("matrix", "build and verify a separation matrix");
  matrix->add_option("--classes", classes, "number of classes (>= 2)")->required();
  matrix->add_option("--out", matrix_out, "write the matrix as CSV to this path");
  matrix->add_option("--tolerance", tolerance, "verification tolerance")
      ->check(CLI::PositiveNumber);

  // shared options for the config-driven verbs
  std::string config_path;
  std::vector<std::uint64_t> seed_override;
  std::size_t jobs = 1;
  bool debug_separated = false;
  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config (JSON)")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--seed", seed_override, "override the config seed list");
    sub->add_option("--jobs", jobs, "parallel runs")->check(CLI::PositiveNumber);
  };
  CLI::App* train = app.add_subcommand("train", "long-tailed classification protocol");
  add_common(train);
  CLI::App* eval_ood = app.add_subcommand("eval-ood", "out-of-distribution detection protocol");
  add_common(eval_ood);
  eval_ood->add_flag("--debug-separated-scores", debug_separated,
                     "replace detector scores with a perfectly separated set (plumbing check)");
  CLI::App* eval_osr = app.add_subcommand("eval-osr", "open-set recognition protocol");
  add_common(eval_osr);

  // report
  std::string results_dir;
  CLI::App* report = app.add_subcommand("report", "render tables from a results directory");
  report->add_option("results_dir", results_dir, "directory previously passed as output_dir")
      ->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (matrix->parsed()) return cmd_matrix(classes, matrix_out, tolerance);
    if (train->parsed()) {
      const maxsep::ExperimentConfig cfg = load_with_overrides(config_path, seed_override);
      const auto results = maxsep::run_training(cfg, jobs);
      print_runs(results);
      std::printf("results under %s/%s\n", cfg.output_dir.c_str(),
                  maxsep::config_hash(cfg).c_str());
      return 0;
    }
    if (eval_ood->parsed()) {
      maxsep::ExperimentConfig cfg = load_with_overrides(config_path, seed_override);
      if (debug_separated) cfg.debug_inject_separated_scores = true;
      const auto results = maxsep::run_ood(cfg, jobs);
      print_runs(results);
      std::printf("summary %s/%s/ood_summary.json\n", cfg.output_dir.c_str(),
                  maxsep::config_hash(cfg).c_str());
      return 0;
    }
    if (eval_osr->parsed()) {
      const maxsep::ExperimentConfig cfg = load_with_overrides(config_path, seed_override);
      const auto results = maxsep::run_osr(cfg, jobs);
      print_runs(results);
      std::printf("summary %s/%s/osr_summary.json\n", cfg.output_dir.c_str(),
                  maxsep::config_hash(cfg).c_str());
      return 0;
    }
    if (report->parsed()) {
      maxsep::render_report(std::cout, results_dir);
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
