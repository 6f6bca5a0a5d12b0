// Experiment orchestration: config parsing and hashing, run execution with
// on-disk persistence, the three protocols, and report rendering.
#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "maxsep/errors.hpp"
#include "maxsep/experiment.hpp"

using namespace maxsep;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("maxsep_test_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

json tiny_config_json(const std::string& out_dir) {
  return json{
      {"dataset",
       {{"kind", "blobs"},
        {"num_classes", 3},
        {"dim", 6},
        {"train_per_class", 30},
        {"test_per_class", 15},
        {"mean_scale", 3.0},
        {"noise_std", 1.0},
        {"data_seed", 11}}},
      {"imbalance_factors", {1.0, 0.1}},
      {"heads", {"max_sep_fixed", "standard_linear"}},
      {"hidden_dims", {8}},
      {"epochs", 3},
      {"batch_size", 16},
      {"seeds", {1, 2}},
      {"output_dir", out_dir},
  };
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("config parsing applies defaults and reads explicit values") {
  const ExperimentConfig cfg = config_from_json(tiny_config_json("/tmp/x"));
  CHECK(cfg.dataset.kind == DatasetKind::Blobs);
  CHECK(cfg.dataset.num_classes == 3);
  CHECK(cfg.dataset.dim == 6);
  CHECK(cfg.imbalance_factors == std::vector<double>{1.0, 0.1});
  CHECK(cfg.heads == std::vector<HeadKind>{HeadKind::MaxSepFixed, HeadKind::StandardLinear});
  CHECK(cfg.hidden_dims == std::vector<std::size_t>{8});
  CHECK(cfg.epochs == 3);
  CHECK(cfg.batch_size == 16);
  CHECK(cfg.seeds == std::vector<std::uint64_t>{1, 2});
  CHECK(cfg.output_dir == "/tmp/x");
  // defaults
  CHECK(cfg.rho == 1.0);
  CHECK(cfg.optimizer.initial_lr == 0.1);
  CHECK(cfg.optimizer.momentum == 0.9);
  CHECK(cfg.optimizer.weight_decay == 5e-4);
  CHECK(cfg.optimizer.schedule.kind == ScheduleKind::Cosine);
  CHECK(cfg.ood.kinds.size() == 2);
  CHECK(cfg.ood.n == 1000);
  CHECK_FALSE(cfg.osr.has_value());
  CHECK_FALSE(cfg.debug_inject_separated_scores);
}

TEST_CASE("config parsing rejects unknown keys at every level") {
  json top = tiny_config_json("/tmp/x");
  top["typo_key"] = 1;
  CHECK_THROWS_MATCHES(config_from_json(top), ConfigError,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("typo_key")));

  json ds = tiny_config_json("/tmp/x");
  ds["dataset"]["noise_level"] = 0.5;
  CHECK_THROWS_MATCHES(config_from_json(ds), ConfigError,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("noise_level")));

  json opt = tiny_config_json("/tmp/x");
  opt["optimizer"] = {{"initial_lr", 0.1}, {"momentm", 0.9}};
  CHECK_THROWS_MATCHES(config_from_json(opt), ConfigError,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("momentm")));

  json ood = tiny_config_json("/tmp/x");
  ood["ood"] = {{"count", 10}};
  CHECK_THROWS_AS(config_from_json(ood), ConfigError);
}

TEST_CASE("config parsing validates required keys and value ranges") {
  json no_dataset = tiny_config_json("/tmp/x");
  no_dataset.erase("dataset");
  CHECK_THROWS_AS(config_from_json(no_dataset), ConfigError);

  json no_heads = tiny_config_json("/tmp/x");
  no_heads.erase("heads");
  CHECK_THROWS_AS(config_from_json(no_heads), ConfigError);

  json no_out = tiny_config_json("/tmp/x");
  no_out.erase("output_dir");
  CHECK_THROWS_AS(config_from_json(no_out), ConfigError);

  json bad_head = tiny_config_json("/tmp/x");
  bad_head["heads"] = {"max_sep_fixd"};
  CHECK_THROWS_AS(config_from_json(bad_head), ConfigError);

  json bad_factor = tiny_config_json("/tmp/x");
  bad_factor["imbalance_factors"] = {0.0};
  CHECK_THROWS_AS(config_from_json(bad_factor), ConfigError);

  json bad_factor2 = tiny_config_json("/tmp/x");
  bad_factor2["imbalance_factors"] = {1.5};
  CHECK_THROWS_AS(config_from_json(bad_factor2), ConfigError);

  json empty_seeds = tiny_config_json("/tmp/x");
  empty_seeds["seeds"] = json::array();
  CHECK_THROWS_AS(config_from_json(empty_seeds), ConfigError);

  json wrong_type = tiny_config_json("/tmp/x");
  wrong_type["epochs"] = "ten";
  CHECK_THROWS_AS(config_from_json(wrong_type), ConfigError);

  json bad_sched = tiny_config_json("/tmp/x");
  bad_sched["optimizer"] = {{"schedule", "linear"}};
  CHECK_THROWS_AS(config_from_json(bad_sched), ConfigError);

  CHECK_THROWS_AS(config_from_json(json::array({1, 2})), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("config hash is stable across defaults and key order, sensitive to semantics") {
  const ExperimentConfig a = config_from_json(tiny_config_json("/tmp/a"));
  const std::string h = config_hash(a);
  CHECK(h.size() == 16);
  CHECK(h.find_first_not_of("0123456789abcdef") == std::string::npos);

  // same semantics spelled differently: explicit defaults, different dir/seeds
  json explicit_defaults = tiny_config_json("/tmp/b");
  explicit_defaults["rho"] = 1.0;
  explicit_defaults["optimizer"] = {{"initial_lr", 0.1},
                                    {"momentum", 0.9},
                                    {"weight_decay", 5e-4},
                                    {"schedule", "cosine"}};
  explicit_defaults["seeds"] = {7, 8, 9};
  CHECK(config_hash(config_from_json(explicit_defaults)) == h);

  // any semantic change moves the hash
  json changed = tiny_config_json("/tmp/a");
  changed["rho"] = 2.0;
  CHECK(config_hash(config_from_json(changed)) != h);
  json changed2 = tiny_config_json("/tmp/a");
  changed2["dataset"]["noise_std"] = 1.5;
  CHECK(config_hash(config_from_json(changed2)) != h);
  json changed3 = tiny_config_json("/tmp/a");
  changed3["epochs"] = 4;
  CHECK(config_hash(config_from_json(changed3)) != h);
  json changed4 = tiny_config_json("/tmp/a");
  changed4["osr"] = {{"known_classes", {0, 1}}};
  CHECK(config_hash(config_from_json(changed4)) != h);
}

TEST_CASE("run_training persists one result per factor x head x seed") {
  TempDir tmp("train");
  const ExperimentConfig cfg = config_from_json(tiny_config_json((tmp.path / "out").string()));
  const std::vector<RunResult> results = run_training(cfg);
  REQUIRE(results.size() == 2 * 2 * 2);  // factors x heads x seeds

  const std::string hash = config_hash(cfg);
  std::size_t files = 0;
  for (const RunResult& r : results) {
    CHECK(r.config_hash == hash);
    CHECK(r.protocol == "train");
    CHECK(r.log.size() == cfg.epochs);
    CHECK(r.per_class_acc.size() == 3);
    CHECK(r.train_counts.size() == 3);
    CHECK(std::isfinite(r.afs));
    const fs::path dir = tmp.path / "out" / hash / std::to_string(r.seed) /
                         head_kind_name(r.head) /
                         ("f" + maxsep::detail::format_double(r.imbalance_factor));
    CHECK(fs::exists(dir / "result.json"));
    CHECK(fs::exists(dir / "log.jsonl"));
    CHECK(fs::exists(dir / "timing.json"));
    CHECK_FALSE(fs::exists(dir / "result.json.tmp"));
    ++files;

    const json body = json::parse(slurp(dir / "result.json"));
    CHECK(body.at("config_hash") == hash);
    CHECK(body.at("seed") == r.seed);
    CHECK(body.at("head") == head_kind_name(r.head));
    CHECK(body.at("log_file") == "log.jsonl");
    CHECK(body.at("final_test_acc") == r.final_test_acc);
    CHECK_FALSE(body.contains("wall_clock_seconds"));

    // one JSONL line per epoch, each parseable with the logged fields
    std::istringstream log_in(slurp(dir / "log.jsonl"));
    std::string line;
    std::size_t lines = 0;
    while (std::getline(log_in, line)) {
      const json e = json::parse(line);
      CHECK(e.at("epoch") == lines);
      CHECK(e.contains("lr"));
      CHECK(e.contains("loss"));
      CHECK(e.contains("train_acc"));
      CHECK(e.contains("test_acc"));
      ++lines;
    }
    CHECK(lines == cfg.epochs);
  }
  CHECK(files == 8);

  SECTION("factor-1 runs see the full balanced pool") {
    for (const RunResult& r : results)
      if (r.imbalance_factor == 1.0)
        CHECK(r.train_counts == std::vector<std::size_t>{30, 30, 30});
  }
}

TEST_CASE("rerunning a config reproduces every persisted byte of results and logs") {
  TempDir tmp("determinism");
  const ExperimentConfig cfg = config_from_json(tiny_config_json((tmp.path / "out").string()));
  run_training(cfg);
  const std::string hash = config_hash(cfg);

  std::map<std::string, std::string> first;
  for (const auto& entry : fs::recursive_directory_iterator(tmp.path / "out"))
    if (entry.is_regular_file() && entry.path().filename() != "timing.json")
      first[entry.path().string()] = slurp(entry.path());
  REQUIRE(first.size() == 16);  // 8 runs x (result.json + log.jsonl)

  run_training(cfg);
  for (const auto& [path, content] : first) CHECK(slurp(path) == content);

  SECTION("parallel execution lands on identical bytes too") {
    TempDir tmp2("parallel");
    json j = tiny_config_json((tmp2.path / "out").string());
    const ExperimentConfig cfg2 = config_from_json(j);
    run_training(cfg2, 2);
    for (const auto& [path, content] : first) {
      const std::string other =
          (tmp2.path / "out" / fs::relative(path, tmp.path / "out")).string();
      CHECK(slurp(other) == content);
    }
  }
}

TEST_CASE("ood protocol writes metric triples for every kind and score") {
  TempDir tmp("ood");
  json j = tiny_config_json((tmp.path / "out").string());
  j["seeds"] = {1};
  j["ood"] = {{"kinds", {"uniform_noise", "shifted_blobs"}},
              {"n", 60},
              {"shift_offset", 8.0},
              {"seed", 99}};
  const ExperimentConfig cfg = config_from_json(j);
  const std::vector<RunResult> results = run_ood(cfg);
  REQUIRE(results.size() == 2);  // heads x seeds

  for (const RunResult& r : results) {
    CHECK(r.protocol == "ood");
    for (const char* kind : {"uniform_noise", "shifted_blobs"}) {
      REQUIRE(r.ood.contains(kind));
      for (const char* score : {"msp", "energy", "mahalanobis"}) {
        const json& m = r.ood.at(kind).at(score);
        CHECK(m.at("auroc").get<double>() >= 0.0);
        CHECK(m.at("auroc").get<double>() <= 1.0);
        CHECK(m.contains("aupr"));
        CHECK(m.contains("fpr95"));
      }
    }
    const fs::path dir = tmp.path / "out" / r.config_hash / std::to_string(r.seed) /
                         head_kind_name(r.head) / "ood";
    CHECK(fs::exists(dir / "result.json"));
    CHECK(fs::exists(dir / "scores_uniform_noise_energy.csv"));
    CHECK(fs::exists(dir / "scores_shifted_blobs_mahalanobis.csv"));
  }

  // summary holds 2 heads x 2 kinds x 3 scores = 12 metric triples
  const json summary =
      json::parse(slurp(tmp.path / "out" / config_hash(cfg) / "ood_summary.json"));
  std::size_t triples = 0;
  for (const char* head : {"max_sep_fixed", "standard_linear"})
    for (const char* kind : {"uniform_noise", "shifted_blobs"})
      for (const char* score : {"msp", "energy", "mahalanobis"}) {
        const json& m = summary.at(head).at(kind).at(score);
        CHECK(m.contains("auroc"));
        CHECK(m.contains("aupr"));
        CHECK(m.contains("fpr95"));
        ++triples;
      }
  CHECK(triples == 12);
}

TEST_CASE("debug score injection forces perfect separation through the whole pipeline") {
  TempDir tmp("debug");
  json j = tiny_config_json((tmp.path / "out").string());
  j["seeds"] = {1};
  j["heads"] = {"max_sep_fixed"};
  j["ood"] = {{"kinds", {"uniform_noise"}}, {"n", 30}};
  j["debug_inject_separated_scores"] = true;
  const std::vector<RunResult> results = run_ood(config_from_json(j));
  REQUIRE(results.size() == 1);
  for (const char* score : {"msp", "energy", "mahalanobis"}) {
    const json& m = results[0].ood.at("uniform_noise").at(score);
    CHECK(m.at("auroc").get<double>() == 1.0);
    CHECK(m.at("aupr").get<double>() == 1.0);
    CHECK(m.at("fpr95").get<double>() == 0.0);
  }
}

TEST_CASE("osr protocol trains on known classes and scores the held-out ones") {
  TempDir tmp("osr");
  json j = tiny_config_json((tmp.path / "out").string());
  j["seeds"] = {1};
  j["osr"] = {{"known_classes", {0, 2}}};
  const ExperimentConfig cfg = config_from_json(j);
  const std::vector<RunResult> results = run_osr(cfg);
  REQUIRE(results.size() == 2);
  for (const RunResult& r : results) {
    CHECK(r.protocol == "osr");
    CHECK(r.osr.at("known_classes") == json({0, 2}));
    CHECK(r.osr.at("msp").contains("auroc"));
    CHECK(r.osr.at("mls").contains("auroc"));
    CHECK(r.per_class_acc.size() == 2);  // the relabeled known-class problem
  }
  CHECK(fs::exists(tmp.path / "out" / config_hash(cfg) / "osr_summary.json"));
}

TEST_CASE("osr rejects degenerate known-class sets") {
  json all_known = tiny_config_json("/tmp/x");
  all_known["osr"] = {{"known_classes", {0, 1, 2}}};
  CHECK_THROWS_MATCHES(run_osr(config_from_json(all_known)), ConfigError,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("proper subset")));

  json too_few = tiny_config_json("/tmp/x");
  too_few["osr"] = {{"known_classes", {1}}};
  CHECK_THROWS_AS(run_osr(config_from_json(too_few)), ConfigError);

  json out_of_range = tiny_config_json("/tmp/x");
  out_of_range["osr"] = {{"known_classes", {0, 7}}};
  CHECK_THROWS_AS(run_osr(config_from_json(out_of_range)), ConfigError);

  json missing = tiny_config_json("/tmp/x");
  CHECK_THROWS_AS(run_osr(config_from_json(missing)), ConfigError);
}

TEST_CASE("report renders accuracy, delta, afs tables and per-class csv") {
  TempDir tmp("report");
  const ExperimentConfig cfg = config_from_json(tiny_config_json((tmp.path / "out").string()));
  run_training(cfg);

  std::ostringstream first;
  render_report(first, tmp.path / "out");
  const std::string text = first.str();
  CHECK(text.find("test accuracy") != std::string::npos);
  CHECK(text.find("max_sep_fixed") != std::string::npos);
  CHECK(text.find("standard_linear") != std::string::npos);
  CHECK(text.find("accuracy delta vs max_sep_fixed") != std::string::npos);
  CHECK(text.find("angular fisher score") != std::string::npos);
  // delta rows carry an explicit sign
  const std::size_t delta_pos = text.find("factor 1 vs standard_linear: ");
  REQUIRE(delta_pos != std::string::npos);
  const char sign = text[delta_pos + std::string("factor 1 vs standard_linear: ").size()];
  CHECK((sign == '+' || sign == '-'));

  const std::string hash = config_hash(cfg);
  for (const char* tag : {"f1", "f0.1"}) {
    const fs::path csv_path = tmp.path / "out" / hash / ("per_class_" + std::string(tag) + ".csv");
    REQUIRE(fs::exists(csv_path));
    std::istringstream csv(slurp(csv_path));
    std::string line;
    REQUIRE(std::getline(csv, line));
    CHECK(line == "class,train_count,acc_base,acc_maxsep,delta");
    std::size_t rows = 0;
    while (std::getline(csv, line)) {
      CHECK(std::count(line.begin(), line.end(), ',') == 4);
      ++rows;
    }
    CHECK(rows == 3);  // one per class
  }

  SECTION("rerendering produces identical bytes") {
    const std::string csv_before = slurp(tmp.path / "out" / hash / "per_class_f1.csv");
    std::ostringstream second;
    render_report(second, tmp.path / "out");
    CHECK(second.str() == text);
    CHECK(slurp(tmp.path / "out" / hash / "per_class_f1.csv") == csv_before);
  }
}

TEST_CASE("report rejects empty or missing results directories") {
  TempDir tmp("empty");
  std::ostringstream out;
  CHECK_THROWS_AS(render_report(out, tmp.path), std::invalid_argument);
  CHECK_THROWS_AS(render_report(out, tmp.path / "nope"), std::invalid_argument);
}
