#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "maxsep/data.hpp"
#include "maxsep/errors.hpp"
#include "maxsep/eval.hpp"
#include "maxsep/nn.hpp"
#include "maxsep/numeric_io.hpp"
#include "maxsep/rng.hpp"
#include "maxsep/separation.hpp"

namespace maxsep {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class DatasetKind { Blobs, Idx };

struct DatasetConfig {
  DatasetKind kind = DatasetKind::Blobs;
  // blobs
  std::size_t num_classes = 10;
  std::size_t dim = 64;
  std::size_t train_per_class = 500;
  std::size_t test_per_class = 100;
  double mean_scale = 1.0;
  double noise_std = 2.0;
  std::uint64_t data_seed = 1234;
  // idx
  std::string train_images, train_labels, test_images, test_labels;
};

struct OodConfig {
  std::vector<OodKind> kinds{OodKind::UniformNoise, OodKind::ShiftedBlobs};
  std::size_t n = 1000;
  double shift_offset = 3.0;
  std::uint64_t seed = 9001;
};

struct OsrConfig {
  std::vector<int> known_classes;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  std::vector<double> imbalance_factors{1.0};
  std::vector<HeadKind> heads;
  std::vector<std::size_t> hidden_dims{64};
  double rho = 1.0;
  OptimizerConfig optimizer;
  std::size_t epochs = 40;
  std::size_t batch_size = 128;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::string output_dir;
  OodConfig ood;
  std::optional<OsrConfig> osr;
  bool debug_inject_separated_scores = false;
};

inline const char* ood_kind_name(OodKind k) {
  return k == OodKind::UniformNoise ? "uniform_noise" : "shifted_blobs";
}

inline OodKind ood_kind_from_name(const std::string& name) {
  if (name == "uniform_noise") return OodKind::UniformNoise;
  if (name == "shifted_blobs") return OodKind::ShiftedBlobs;
  throw ConfigError("unknown ood kind '" + name + "' (want uniform_noise | shifted_blobs)");
}

namespace detail {

inline void require_known_keys(const nlohmann::json& obj, const std::string& ctx,
                               std::initializer_list<const char*> allowed) {
  for (const auto& item : obj.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (item.key() == a) ok = true;
    if (!ok) throw ConfigError("config " + ctx + ": unknown key '" + item.key() + "'");
  }
}

}  // namespace detail

/// Strict parse: every object is checked against its documented key set, so
/// a typo fails loudly instead of silently falling back to a default.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
  detail::require_known_keys(j, "(top level)",
                             {"dataset", "imbalance_factors", "heads", "hidden_dims", "rho",
                              "optimizer", "epochs", "batch_size", "seeds", "output_dir", "ood",
                              "osr", "debug_inject_separated_scores"});
  ExperimentConfig cfg;
  try {
    if (!j.contains("dataset")) throw ConfigError("config: missing required key 'dataset'");
    const nlohmann::json& d = j.at("dataset");
    const std::string kind = d.value("kind", "blobs");
    if (kind == "blobs") {
      detail::require_known_keys(d, "dataset",
                                 {"kind", "num_classes", "dim", "train_per_class",
                                  "test_per_class", "mean_scale", "noise_std", "data_seed"});
      cfg.dataset.kind = DatasetKind::Blobs;
      cfg.dataset.num_classes = d.value("num_classes", cfg.dataset.num_classes);
      cfg.dataset.dim = d.value("dim", cfg.dataset.dim);
      cfg.dataset.train_per_class = d.value("train_per_class", cfg.dataset.train_per_class);
      cfg.dataset.test_per_class = d.value("test_per_class", cfg.dataset.test_per_class);
      cfg.dataset.mean_scale = d.value("mean_scale", cfg.dataset.mean_scale);
      cfg.dataset.noise_std = d.value("noise_std", cfg.dataset.noise_std);
      cfg.dataset.data_seed = d.value("data_seed", cfg.dataset.data_seed);
    } else if (kind == "idx") {
      detail::require_known_keys(
          d, "dataset", {"kind", "train_images", "train_labels", "test_images", "test_labels"});
      cfg.dataset.kind = DatasetKind::Idx;
      cfg.dataset.train_images = d.at("train_images").get<std::string>();
      cfg.dataset.train_labels = d.at("train_labels").get<std::string>();
      cfg.dataset.test_images = d.at("test_images").get<std::string>();
      cfg.dataset.test_labels = d.at("test_labels").get<std::string>();
    } else {
      throw ConfigError("config dataset: unknown kind '" + kind + "' (want blobs | idx)");
    }

    if (j.contains("imbalance_factors"))
      cfg.imbalance_factors = j.at("imbalance_factors").get<std::vector<double>>();
    if (!j.contains("heads")) throw ConfigError("config: missing required key 'heads'");
    for (const auto& name : j.at("heads"))
      cfg.heads.push_back(head_kind_from_name(name.get<std::string>()));
    if (j.contains("hidden_dims"))
      cfg.hidden_dims = j.at("hidden_dims").get<std::vector<std::size_t>>();
    cfg.rho = j.value("rho", cfg.rho);

    if (j.contains("optimizer")) {
      const nlohmann::json& o = j.at("optimizer");
      detail::require_known_keys(o, "optimizer",
                                 {"initial_lr", "momentum", "weight_decay", "schedule",
                                  "milestones", "gamma"});
      cfg.optimizer.initial_lr = o.value("initial_lr", cfg.optimizer.initial_lr);
      cfg.optimizer.momentum = o.value("momentum", cfg.optimizer.momentum);
      cfg.optimizer.weight_decay = o.value("weight_decay", cfg.optimizer.weight_decay);
      const std::string sched = o.value("schedule", "cosine");
      if (sched == "cosine") {
        cfg.optimizer.schedule.kind = ScheduleKind::Cosine;
      } else if (sched == "step") {
        cfg.optimizer.schedule.kind = ScheduleKind::Step;
        cfg.optimizer.schedule.milestones =
            o.value("milestones", std::vector<std::size_t>{});
        cfg.optimizer.schedule.gamma = o.value("gamma", 0.1);
      } else {
        throw ConfigError("config optimizer: unknown schedule '" + sched +
                          "' (want cosine | step)");
      }
    }

    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    if (j.contains("seeds")) cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (!j.contains("output_dir")) throw ConfigError("config: missing required key 'output_dir'");
    cfg.output_dir = j.at("output_dir").get<std::string>();

    if (j.contains("ood")) {
      const nlohmann::json& o = j.at("ood");
      detail::require_known_keys(o, "ood", {"kinds", "n", "shift_offset", "seed"});
      if (o.contains("kinds")) {
        cfg.ood.kinds.clear();
        for (const auto& name : o.at("kinds"))
          cfg.ood.kinds.push_back(ood_kind_from_name(name.get<std::string>()));
      }
      cfg.ood.n = o.value("n", cfg.ood.n);
      cfg.ood.shift_offset = o.value("shift_offset", cfg.ood.shift_offset);
      cfg.ood.seed = o.value("seed", cfg.ood.seed);
    }
    if (j.contains("osr")) {
      const nlohmann::json& o = j.at("osr");
      detail::require_known_keys(o, "osr", {"known_classes"});
      OsrConfig osr;
      osr.known_classes = o.at("known_classes").get<std::vector<int>>();
      cfg.osr = osr;
    }
    cfg.debug_inject_separated_scores = j.value("debug_inject_separated_scores", false);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }

  if (cfg.heads.empty()) throw ConfigError("config: heads list must be non-empty");
  if (cfg.seeds.empty()) throw ConfigError("config: seeds list must be non-empty");
  if (cfg.imbalance_factors.empty())
    throw ConfigError("config: imbalance_factors must be non-empty");
  for (const double f : cfg.imbalance_factors)
    if (!(f > 0.0) || f > 1.0)
      throw ConfigError("config: imbalance factor " + std::to_string(f) + " outside (0, 1]");
  if (cfg.ood.n < 1) throw ConfigError("config: ood.n must be >= 1");
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

/// Canonical JSON of the semantic fields only: output_dir and the seed list
/// are excluded, since a run's identity is (hash, seed) and the on-disk
/// location is the caller's business.
inline nlohmann::json canonical_config_json(const ExperimentConfig& cfg) {
  nlohmann::json j;
  if (cfg.dataset.kind == DatasetKind::Blobs) {
    j["dataset"] = {{"kind", "blobs"},
                    {"num_classes", cfg.dataset.num_classes},
                    {"dim", cfg.dataset.dim},
                    {"train_per_class", cfg.dataset.train_per_class},
                    {"test_per_class", cfg.dataset.test_per_class},
                    {"mean_scale", cfg.dataset.mean_scale},
                    {"noise_std", cfg.dataset.noise_std},
                    {"data_seed", cfg.dataset.data_seed}};
  } else {
    j["dataset"] = {{"kind", "idx"},
                    {"train_images", cfg.dataset.train_images},
                    {"train_labels", cfg.dataset.train_labels},
                    {"test_images", cfg.dataset.test_images},
                    {"test_labels", cfg.dataset.test_labels}};
  }
  j["imbalance_factors"] = cfg.imbalance_factors;
  std::vector<std::string> heads;
  for (const HeadKind h : cfg.heads) heads.emplace_back(head_kind_name(h));
  j["heads"] = heads;
  j["hidden_dims"] = cfg.hidden_dims;
  j["rho"] = cfg.rho;
  j["optimizer"] = {{"initial_lr", cfg.optimizer.initial_lr},
                    {"momentum", cfg.optimizer.momentum},
                    {"weight_decay", cfg.optimizer.weight_decay},
                    {"schedule", cfg.optimizer.schedule.kind == ScheduleKind::Cosine ? "cosine" : "step"},
                    {"milestones", cfg.optimizer.schedule.milestones},
                    {"gamma", cfg.optimizer.schedule.gamma}};
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  std::vector<std::string> kinds;
  for (const OodKind k : cfg.ood.kinds) kinds.emplace_back(ood_kind_name(k));
  j["ood"] = {{"kinds", kinds},
              {"n", cfg.ood.n},
              {"shift_offset", cfg.ood.shift_offset},
              {"seed", cfg.ood.seed}};
  if (cfg.osr) j["osr"] = {{"known_classes", cfg.osr->known_classes}};
  return j;
}

/// FNV-1a over the canonical dump, as 16 hex digits.
inline std::string config_hash(const ExperimentConfig& cfg) {
  const std::string dump = canonical_config_json(cfg).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (const unsigned char c : dump) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

// ---------------------------------------------------------------------------
// Run execution
// ---------------------------------------------------------------------------

struct RunResult {
  std::string config_hash;
  std::string protocol = "train";  // train | ood | osr, names the run directory leaf
  std::uint64_t seed = 0;
  HeadKind head = HeadKind::MaxSepFixed;
  double imbalance_factor = 1.0;
  double final_train_acc = 0.0;
  double final_test_acc = 0.0;
  std::vector<double> per_class_acc;
  std::vector<std::size_t> train_counts;
  double afs = 0.0;
  std::vector<EpochRecord> log;
  nlohmann::json ood;  // filled by the ood protocol
  nlohmann::json osr;  // filled by the osr protocol
  double wall_clock_seconds = 0.0;  // sidecar only, never part of result.json
};

namespace detail {

inline void atomic_write(const std::filesystem::path& path, const std::string& content) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + tmp.string());
    out << content;
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string factor_tag(double factor) { return "f" + format_double(factor); }

inline nlohmann::json epoch_to_json(const EpochRecord& r) {
  nlohmann::json j;
  j["epoch"] = r.epoch;
  j["lr"] = r.lr;
  j["loss"] = r.loss;
  j["train_acc"] = r.train_acc;
  if (std::isnan(r.test_acc))
    j["test_acc"] = nullptr;
  else
    j["test_acc"] = r.test_acc;
  return j;
}

inline nlohmann::json result_to_json(const RunResult& r) {
  nlohmann::json j;
  j["config_hash"] = r.config_hash;
  j["protocol"] = r.protocol;
  j["seed"] = r.seed;
  j["head"] = head_kind_name(r.head);
  j["imbalance_factor"] = r.imbalance_factor;
  j["final_train_acc"] = r.final_train_acc;
  j["final_test_acc"] = r.final_test_acc;
  j["per_class_acc"] = r.per_class_acc;
  j["train_counts"] = r.train_counts;
  j["afs"] = r.afs;
  j["log_file"] = "log.jsonl";
  if (!r.ood.is_null()) j["ood"] = r.ood;
  if (!r.osr.is_null()) j["osr"] = r.osr;
  return j;
}

/// Leaf directory of a run: the factor tag for training runs, the protocol
/// name for the evaluation protocols (which always train balanced), so the
/// three protocols never clobber each other's results.
inline std::filesystem::path run_dir(const ExperimentConfig& cfg, const std::string& hash,
                                     const std::string& protocol, std::uint64_t seed,
                                     HeadKind head, double factor) {
  return std::filesystem::path(cfg.output_dir) / hash / std::to_string(seed) /
         head_kind_name(head) / (protocol == "train" ? factor_tag(factor) : protocol);
}

inline void persist_run(const ExperimentConfig& cfg, const RunResult& r) {
  const std::filesystem::path dir =
      run_dir(cfg, r.config_hash, r.protocol, r.seed, r.head, r.imbalance_factor);
  std::filesystem::create_directories(dir);
  atomic_write(dir / "result.json", result_to_json(r).dump(2) + "\n");
  std::string log_lines;
  for (const EpochRecord& e : r.log) log_lines += epoch_to_json(e).dump() + "\n";
  atomic_write(dir / "log.jsonl", log_lines);
  nlohmann::json timing;
  timing["wall_clock_seconds"] = r.wall_clock_seconds;
  atomic_write(dir / "timing.json", timing.dump() + "\n");
}

/// Balanced train/test pools for the configured dataset.
inline std::pair<Dataset, Dataset> load_pools(const DatasetConfig& d) {
  if (d.kind == DatasetKind::Blobs) {
    BlobSpec spec;
    spec.num_classes = d.num_classes;
    spec.dim = d.dim;
    spec.samples_per_class = d.train_per_class + d.test_per_class;
    spec.mean_scale = d.mean_scale;
    spec.noise_std = d.noise_std;
    spec.seed = d.data_seed;
    return split_per_class(gen_blobs(spec), d.train_per_class, d.data_seed);
  }
  Dataset train = load_idx(d.train_images, d.train_labels);
  Dataset test = load_idx(d.test_images, d.test_labels);
  const std::size_t c = std::max(train.num_classes, test.num_classes);
  train.num_classes = c;
  test.num_classes = c;
  return {std::move(train), std::move(test)};
}

/// Runs `tasks` indexed jobs, inline for jobs <= 1, else on a small pool.
/// Each job must touch disjoint state.
inline void run_parallel(std::size_t count, std::size_t jobs,
                         const std::function<void(std::size_t)>& task) {
  if (jobs <= 1) {
    for (std::size_t i = 0; i < count; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error = nullptr;
  std::mutex error_mutex;
  const std::size_t workers = std::min(jobs, count);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= count) return;
        try {
          task(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  for (std::thread& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace detail

/// One (factor, head, seed) training run: subsample the long tail, train,
/// measure accuracy breakdowns and the angular Fisher score on the balanced
/// test split. Returns the trained network alongside the result so protocol
/// wrappers can keep scoring without retraining.
inline std::pair<RunResult, Network> execute_training_run(const ExperimentConfig& cfg,
                                                          const Dataset& train_pool,
                                                          const Dataset& test_set, double factor,
                                                          HeadKind head, std::uint64_t seed) {
  const auto started = std::chrono::steady_clock::now();

  std::size_t n_max = cfg.dataset.train_per_class;
  if (cfg.dataset.kind == DatasetKind::Idx) {
    const std::vector<std::size_t> counts = class_counts(train_pool);
    n_max = *std::min_element(counts.begin(), counts.end());
  }
  const ImbalanceProfile profile =
      make_longtail_profile(train_pool.num_classes, n_max, factor);
  const Dataset train_ds = subsample_longtail(train_pool, profile, seed);

  Network net = make_network(train_ds.features.cols(), cfg.hidden_dims, train_ds.num_classes,
                             head, cfg.rho, seed);
  RunResult r;
  r.config_hash = config_hash(cfg);
  r.seed = seed;
  r.head = head;
  r.imbalance_factor = factor;
  r.train_counts = profile.per_class_counts;
  r.log = train(net, train_ds, &test_set, cfg.optimizer, cfg.epochs, cfg.batch_size, seed);

  const ForwardCache test_cache = forward(net, test_set.features);
  const std::vector<int> preds = argmax_rows(test_cache.logits);
  r.final_test_acc = accuracy(preds, test_set.labels);
  r.final_train_acc = r.log.empty() ? 0.0 : r.log.back().train_acc;
  r.per_class_acc = per_class_accuracy(preds, test_set.labels, test_set.num_classes);
  r.afs = angular_fisher_score(test_cache.features, test_set.labels, test_set.num_classes);

  r.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return {std::move(r), std::move(net)};
}

/// The long-tailed classification protocol: every (factor x head x seed)
/// combination, each persisted under
/// <output_dir>/<confighash>/<seed>/<head>/<factor>/.
inline std::vector<RunResult> run_training(const ExperimentConfig& cfg, std::size_t jobs = 1) {
  const auto [train_pool, test_set] = detail::load_pools(cfg.dataset);
  struct Task {
    double factor;
    HeadKind head;
    std::uint64_t seed;
  };
  std::vector<Task> tasks;
  for (const double factor : cfg.imbalance_factors)
    for (const HeadKind head : cfg.heads)
      for (const std::uint64_t seed : cfg.seeds) tasks.push_back({factor, head, seed});

  std::vector<RunResult> results(tasks.size());
  detail::run_parallel(tasks.size(), jobs, [&](std::size_t i) {
    const Task& t = tasks[i];
    auto [r, net] = execute_training_run(cfg, train_pool, test_set, t.factor, t.head, t.seed);
    (void)net;
    detail::persist_run(cfg, r);
    results[i] = std::move(r);
  });
  return results;
}

namespace detail {

inline nlohmann::json metrics_to_json(const OODMetrics& m) {
  return {{"fpr95", m.fpr95}, {"auroc", m.auroc}, {"aupr", m.aupr}};
}

}  // namespace detail

/// The OOD detection protocol: balanced training per (head x seed), then
/// msp / energy / mahalanobis scores of the in-distribution test split
/// against every configured OOD set. Score dumps and metrics land in the
/// factor-1 run directory; per-head means over seeds go to ood_summary.json.
inline std::vector<RunResult> run_ood(const ExperimentConfig& cfg, std::size_t jobs = 1) {
  const auto [train_pool, test_set] = detail::load_pools(cfg.dataset);
  const std::string hash = config_hash(cfg);

  struct Task {
    HeadKind head;
    std::uint64_t seed;
  };
  std::vector<Task> tasks;
  for (const HeadKind head : cfg.heads)
    for (const std::uint64_t seed : cfg.seeds) tasks.push_back({head, seed});

  std::vector<RunResult> results(tasks.size());
  detail::run_parallel(tasks.size(), jobs, [&](std::size_t i) {
    const Task& t = tasks[i];
    auto [r, net] = execute_training_run(cfg, train_pool, test_set, 1.0, t.head, t.seed);
    r.protocol = "ood";

    const ForwardCache train_cache = forward(net, train_pool.features);
    const ForwardCache test_cache = forward(net, test_set.features);
    const ClassStats stats =
        fit_class_stats(train_cache.features, train_pool.labels, train_pool.num_classes);

    const std::filesystem::path dir = detail::run_dir(cfg, hash, "ood", t.seed, t.head, 1.0);
    std::filesystem::create_directories(dir);

    nlohmann::json ood_block;
    for (const OodKind kind : cfg.ood.kinds) {
      const Dataset ood_set =
          gen_ood(kind, train_pool, cfg.ood.n, cfg.ood.seed, cfg.ood.shift_offset);
      const ForwardCache ood_cache = forward(net, ood_set.features);

      std::map<std::string, ScoreSet> scores;
      scores["msp"] = {msp_score(test_cache.logits), msp_score(ood_cache.logits)};
      scores["energy"] = {energy_score(test_cache.logits), energy_score(ood_cache.logits)};
      scores["mahalanobis"] = {mahalanobis_score(stats, test_cache.features),
                               mahalanobis_score(stats, ood_cache.features)};
      if (cfg.debug_inject_separated_scores) {
        ScoreSet toy;
        for (std::size_t k = 0; k < 50; ++k) {
          toy.in_scores.push_back(1.0 + static_cast<double>(k));
          toy.out_scores.push_back(-1.0 - static_cast<double>(k));
        }
        for (auto& [name, set] : scores) set = toy;
      }

      nlohmann::json kind_block;
      for (const auto& [name, set] : scores) {
        kind_block[name] = detail::metrics_to_json(ood_metrics(set));
        save_scores_csv(set, dir / ("scores_" + std::string(ood_kind_name(kind)) + "_" + name +
                                    ".csv"));
      }
      ood_block[ood_kind_name(kind)] = kind_block;
    }
    r.ood = ood_block;
    detail::persist_run(cfg, r);
    results[i] = std::move(r);
  });

  // Per-head means over seeds: kinds x scores x 3 metrics.
  nlohmann::json summary;
  summary["config_hash"] = hash;
  summary["seeds"] = cfg.seeds;
  for (std::size_t hi = 0; hi < cfg.heads.size(); ++hi) {
    nlohmann::json head_block;
    for (const OodKind kind : cfg.ood.kinds) {
      nlohmann::json kind_block;
      for (const char* score : {"msp", "energy", "mahalanobis"}) {
        double fpr = 0.0, auroc = 0.0, aupr = 0.0;
        std::size_t n = 0;
        for (const RunResult& r : results) {
          if (r.head != cfg.heads[hi]) continue;
          const nlohmann::json& m = r.ood.at(ood_kind_name(kind)).at(score);
          fpr += m.at("fpr95").get<double>();
          auroc += m.at("auroc").get<double>();
          aupr += m.at("aupr").get<double>();
          ++n;
        }
        kind_block[score] = {{"fpr95", fpr / static_cast<double>(n)},
                             {"auroc", auroc / static_cast<double>(n)},
                             {"aupr", aupr / static_cast<double>(n)}};
      }
      head_block[ood_kind_name(kind)] = kind_block;
    }
    summary[head_kind_name(cfg.heads[hi])] = head_block;
  }
  detail::atomic_write(std::filesystem::path(cfg.output_dir) / hash / "ood_summary.json",
                       summary.dump(2) + "\n");
  return results;
}

/// The open-set protocol: train on the configured known classes only, then
/// measure msp / mls AUROC between known-class test samples and test samples
/// of the held-out classes.
inline std::vector<RunResult> run_osr(const ExperimentConfig& cfg, std::size_t jobs = 1) {
  if (!cfg.osr) throw ConfigError("config: eval-osr requires an 'osr' block with known_classes");
  const auto [train_pool, test_set] = detail::load_pools(cfg.dataset);
  const std::size_t c_total = train_pool.num_classes;

  std::vector<int> known = cfg.osr->known_classes;
  std::sort(known.begin(), known.end());
  known.erase(std::unique(known.begin(), known.end()), known.end());
  for (const int k : known)
    if (k < 0 || static_cast<std::size_t>(k) >= c_total)
      throw ConfigError("config: osr known class " + std::to_string(k) + " outside [0, " +
                        std::to_string(c_total) + ")");
  if (known.size() < 2) throw ConfigError("config: osr needs at least 2 known classes");
  if (known.size() >= c_total)
    throw ConfigError("config: osr known classes must be a proper subset (no open classes left)");

  std::vector<int> relabel(c_total, -1);
  for (std::size_t i = 0; i < known.size(); ++i) relabel[static_cast<std::size_t>(known[i])] = static_cast<int>(i);
  const auto filter_known = [&](const Dataset& ds, const std::string& suffix) {
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < ds.labels.size(); ++i)
      if (relabel[static_cast<std::size_t>(ds.labels[i])] >= 0) keep.push_back(i);
    Dataset out;
    out.features = Matrix(keep.size(), ds.features.cols());
    out.labels.resize(keep.size());
    out.num_classes = known.size();
    out.name = ds.name + suffix;
    for (std::size_t i = 0; i < keep.size(); ++i) {
      const double* src = ds.features.row(keep[i]);
      std::copy(src, src + ds.features.cols(), out.features.row(i));
      out.labels[i] = relabel[static_cast<std::size_t>(ds.labels[keep[i]])];
    }
    return out;
  };
  const Dataset known_train = filter_known(train_pool, "-known");
  const Dataset known_test = filter_known(test_set, "-known");
  std::vector<std::size_t> open_rows;
  for (std::size_t i = 0; i < test_set.labels.size(); ++i)
    if (relabel[static_cast<std::size_t>(test_set.labels[i])] < 0) open_rows.push_back(i);
  Matrix open_features(open_rows.size(), test_set.features.cols());
  for (std::size_t i = 0; i < open_rows.size(); ++i) {
    const double* src = test_set.features.row(open_rows[i]);
    std::copy(src, src + test_set.features.cols(), open_features.row(i));
  }

  const std::string hash = config_hash(cfg);
  struct Task {
    HeadKind head;
    std::uint64_t seed;
  };
  std::vector<Task> tasks;
  for (const HeadKind head : cfg.heads)
    for (const std::uint64_t seed : cfg.seeds) tasks.push_back({head, seed});

  std::vector<RunResult> results(tasks.size());
  detail::run_parallel(tasks.size(), jobs, [&](std::size_t i) {
    const Task& t = tasks[i];
    auto [r, net] = execute_training_run(cfg, known_train, known_test, 1.0, t.head, t.seed);
    r.protocol = "osr";

    const Matrix known_logits = forward(net, known_test.features).logits;
    const Matrix open_logits = forward(net, open_features).logits;
    const ScoreSet msp{msp_score(known_logits), msp_score(open_logits)};
    const ScoreSet mls{mls_score(known_logits), mls_score(open_logits)};

    nlohmann::json osr_block;
    osr_block["known_classes"] = known;
    osr_block["msp"] = detail::metrics_to_json(ood_metrics(msp));
    osr_block["mls"] = detail::metrics_to_json(ood_metrics(mls));
    r.osr = osr_block;
    detail::persist_run(cfg, r);
    results[i] = std::move(r);
  });

  nlohmann::json summary;
  summary["config_hash"] = hash;
  summary["seeds"] = cfg.seeds;
  summary["known_classes"] = known;
  for (const HeadKind head : cfg.heads) {
    nlohmann::json head_block;
    for (const char* score : {"msp", "mls"}) {
      double auroc = 0.0;
      std::size_t n = 0;
      for (const RunResult& r : results) {
        if (r.head != head) continue;
        auroc += r.osr.at(score).at("auroc").get<double>();
        ++n;
      }
      head_block[score] = {{"auroc", auroc / static_cast<double>(n)}};
    }
    summary[head_kind_name(head)] = head_block;
  }
  detail::atomic_write(std::filesystem::path(cfg.output_dir) / hash / "osr_summary.json",
                       summary.dump(2) + "\n");
  return results;
}

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------

namespace detail {

struct LoadedResult {
  std::uint64_t seed;
  std::string head;
  std::string protocol;
  double factor;
  nlohmann::json body;
};

inline std::vector<LoadedResult> scan_results(const std::filesystem::path& hash_dir) {
  std::vector<LoadedResult> out;
  if (!std::filesystem::is_directory(hash_dir)) return out;
  for (const auto& seed_entry : std::filesystem::directory_iterator(hash_dir)) {
    if (!seed_entry.is_directory()) continue;
    for (const auto& head_entry : std::filesystem::directory_iterator(seed_entry)) {
      if (!head_entry.is_directory()) continue;
      for (const auto& factor_entry : std::filesystem::directory_iterator(head_entry)) {
        const std::filesystem::path result = factor_entry.path() / "result.json";
        if (!std::filesystem::exists(result)) continue;
        std::ifstream in(result);
        nlohmann::json body = nlohmann::json::parse(in, nullptr, false);
        if (body.is_discarded())
          throw ParseError("report: invalid JSON in " + result.string());
        LoadedResult lr;
        lr.seed = body.value("seed", 0ull);
        lr.head = body.value("head", "");
        lr.protocol = body.value("protocol", "train");
        lr.factor = body.value("imbalance_factor", 1.0);
        lr.body = std::move(body);
        out.push_back(std::move(lr));
      }
    }
  }
  std::sort(out.begin(), out.end(), [](const LoadedResult& a, const LoadedResult& b) {
    if (a.factor != b.factor) return a.factor > b.factor;
    if (a.head != b.head) return a.head < b.head;
    return a.seed < b.seed;
  });
  return out;
}

inline std::string fmt(double v, const char* spec = "%.4f") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return std::string(buf);
}

}  // namespace detail

/// Renders every experiment under `results_dir` as aligned text tables:
/// per-factor test accuracy per head with "+X.XX" percentage-point deltas
/// against the fixed head, the angular Fisher table, and any OOD / open-set
/// metric blocks. Also exports one per-class CSV per factor when both the
/// fixed and the standard head are present. Pure: same directory state,
/// same bytes.
inline void render_report(std::ostream& out, const std::filesystem::path& results_dir) {
  if (!std::filesystem::is_directory(results_dir))
    throw std::invalid_argument("report: not a directory: " + results_dir.string());
  std::vector<std::string> hashes;
  for (const auto& entry : std::filesystem::directory_iterator(results_dir))
    if (entry.is_directory()) hashes.push_back(entry.path().filename().string());
  std::sort(hashes.begin(), hashes.end());

  const std::string reference = "max_sep_fixed";
  const auto heads_of = [](const std::vector<detail::LoadedResult>& rs) {
    std::vector<std::string> heads;
    for (const detail::LoadedResult& r : rs)
      if (std::find(heads.begin(), heads.end(), r.head) == heads.end()) heads.push_back(r.head);
    std::sort(heads.begin(), heads.end());
    return heads;
  };

  bool any = false;
  for (const std::string& hash : hashes) {
    const std::vector<detail::LoadedResult> results =
        detail::scan_results(results_dir / hash);
    if (results.empty()) continue;
    any = true;

    std::vector<detail::LoadedResult> train_rs, ood_rs, osr_rs;
    std::set<std::uint64_t> seeds;
    for (const detail::LoadedResult& r : results) {
      seeds.insert(r.seed);
      if (r.protocol == "ood")
        ood_rs.push_back(r);
      else if (r.protocol == "osr")
        osr_rs.push_back(r);
      else
        train_rs.push_back(r);
    }

    out << "== experiment " << hash << " (" << seeds.size() << " seeds) ==\n";
    char buf[64];

    if (!train_rs.empty()) {
      std::vector<double> factors;
      for (const detail::LoadedResult& r : train_rs)
        if (std::find(factors.begin(), factors.end(), r.factor) == factors.end())
          factors.push_back(r.factor);
      std::sort(factors.rbegin(), factors.rend());
      const std::vector<std::string> heads = heads_of(train_rs);

      const auto mean_of = [&](double factor, const std::string& head, const auto& extract) {
        double sum = 0.0;
        std::size_t n = 0;
        for (const detail::LoadedResult& r : train_rs)
          if (r.factor == factor && r.head == head) {
            sum += extract(r.body);
            ++n;
          }
        return n == 0 ? std::numeric_limits<double>::quiet_NaN()
                      : sum / static_cast<double>(n);
      };
      const auto acc_of = [](const nlohmann::json& b) {
        return b.at("final_test_acc").get<double>();
      };
      // a diverged run serializes its NaN score as null; surface it as nan
      // in the table instead of refusing to render the healthy runs
      const auto afs_of = [](const nlohmann::json& b) {
        const nlohmann::json& v = b.at("afs");
        return v.is_number() ? v.get<double>() : std::numeric_limits<double>::quiet_NaN();
      };

      out << "\ntest accuracy (percent, mean over seeds)\n";
      std::snprintf(buf, sizeof(buf), "%-10s|", "factor");
      out << buf;
      for (const std::string& h : heads) {
        std::snprintf(buf, sizeof(buf), " %-24s", h.c_str());
        out << buf;
      }
      out << '\n';
      for (const double f : factors) {
        std::snprintf(buf, sizeof(buf), "%-10s|", detail::format_double(f).c_str());
        out << buf;
        for (const std::string& h : heads) {
          std::snprintf(buf, sizeof(buf), " %-24s",
                        detail::fmt(100.0 * mean_of(f, h, acc_of), "%.2f").c_str());
          out << buf;
        }
        out << '\n';
      }

      if (std::find(heads.begin(), heads.end(), reference) != heads.end() && heads.size() > 1) {
        out << "\naccuracy delta vs " << reference << " (percentage points, + favors "
            << reference << ")\n";
        for (const std::string& h : heads) {
          if (h == reference) continue;
          for (const double f : factors) {
            const double delta = 100.0 * (mean_of(f, reference, acc_of) - mean_of(f, h, acc_of));
            out << "  factor " << detail::format_double(f) << " vs " << h << ": "
                << detail::fmt(delta, "%+.2f") << '\n';
          }
        }
      }

      out << "\nangular fisher score (mean over seeds, lower is better)\n";
      for (const double f : factors)
        for (const std::string& h : heads)
          out << "  factor " << detail::format_double(f) << " " << h << ": "
              << detail::fmt(mean_of(f, h, afs_of), "%.4f") << '\n';

      // per-class CSV exports, factor by factor, when the head pair exists
      if (std::find(heads.begin(), heads.end(), reference) != heads.end() &&
          std::find(heads.begin(), heads.end(), "standard_linear") != heads.end()) {
        for (const double f : factors) {
          std::vector<double> base, maxsep;
          std::vector<std::size_t> counts;
          std::size_t n_base = 0, n_maxsep = 0;
          for (const detail::LoadedResult& r : train_rs) {
            if (r.factor != f) continue;
            const auto pc = r.body.at("per_class_acc").get<std::vector<double>>();
            if (counts.empty())
              counts = r.body.at("train_counts").get<std::vector<std::size_t>>();
            std::vector<double>* target = nullptr;
            if (r.head == reference) {
              target = &maxsep;
              ++n_maxsep;
            } else if (r.head == "standard_linear") {
              target = &base;
              ++n_base;
            } else {
              continue;
            }
            if (target->empty()) target->assign(pc.size(), 0.0);
            for (std::size_t c = 0; c < pc.size(); ++c) (*target)[c] += pc[c];
          }
          if (base.empty() || maxsep.empty()) continue;
          std::string csv = "class,train_count,acc_base,acc_maxsep,delta\n";
          for (std::size_t c = 0; c < base.size(); ++c) {
            const double b = base[c] / static_cast<double>(n_base);
            const double m = maxsep[c] / static_cast<double>(n_maxsep);
            csv += std::to_string(c) + "," + std::to_string(counts[c]) + "," +
                   detail::fmt(b, "%.4f") + "," + detail::fmt(m, "%.4f") + "," +
                   detail::fmt(m - b, "%+.4f") + "\n";
          }
          detail::atomic_write(
              results_dir / hash / ("per_class_" + detail::factor_tag(f) + ".csv"), csv);
          out << "\nper-class accuracy export: " << hash << "/per_class_"
              << detail::factor_tag(f) << ".csv\n";
        }
      }
    }

    if (!ood_rs.empty()) {
      out << "\nood detection (mean over seeds)\n";
      for (const std::string& h : heads_of(ood_rs)) {
        std::map<std::string, std::map<std::string, std::array<double, 4>>> agg;
        for (const detail::LoadedResult& r : ood_rs) {
          if (r.head != h || !r.body.contains("ood")) continue;
          for (const auto& group : r.body.at("ood").items()) {
            if (!group.value().is_object()) continue;
            for (const auto& score : group.value().items()) {
              if (!score.value().is_object() || !score.value().contains("auroc")) continue;
              std::array<double, 4>& slot = agg[group.key()][score.key()];
              slot[0] += score.value().at("auroc").get<double>();
              slot[1] += score.value().at("aupr").get<double>();
              slot[2] += score.value().at("fpr95").get<double>();
              slot[3] += 1.0;
            }
          }
        }
        for (const auto& [group, scores] : agg)
          for (const auto& [score, slot] : scores)
            out << "  " << h << " " << group << " " << score << ": auroc "
                << detail::fmt(slot[0] / slot[3], "%.4f") << "  aupr "
                << detail::fmt(slot[1] / slot[3], "%.4f") << "  fpr95 "
                << detail::fmt(slot[2] / slot[3], "%.4f") << '\n';
      }
    }

    if (!osr_rs.empty()) {
      out << "\nopen-set recognition auroc (mean over seeds)\n";
      for (const std::string& h : heads_of(osr_rs)) {
        std::map<std::string, std::pair<double, std::size_t>> agg;
        for (const detail::LoadedResult& r : osr_rs) {
          if (r.head != h || !r.body.contains("osr")) continue;
          for (const auto& score : r.body.at("osr").items()) {
            if (!score.value().is_object() || !score.value().contains("auroc")) continue;
            std::pair<double, std::size_t>& slot = agg[score.key()];
            slot.first += score.value().at("auroc").get<double>();
            slot.second += 1;
          }
        }
        for (const auto& [score, slot] : agg)
          out << "  " << h << " " << score << ": "
              << detail::fmt(slot.first / static_cast<double>(slot.second), "%.4f") << '\n';
      }
    }
    out << '\n';
  }
  if (!any) throw std::invalid_argument("report: no results under " + results_dir.string());
}

}  // namespace maxsep
