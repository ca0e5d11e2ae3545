#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "robustlat/dataset.hpp"
#include "robustlat/json_util.hpp"
#include "robustlat/pfid.hpp"
#include "robustlat/toytok.hpp"

namespace robustlat {

inline constexpr int kConfigVersion = 1;
inline constexpr const char* kToolVersion = "robustlat 0.1.0";

struct TrainSettings {
  TrainConfig config;
  // When set, the schedule's delta is nominal and is scaled by K / pfid.k_ref.
  bool scale_delta = true;
  std::int64_t checkpoint_every = 0;  // 0: only the final checkpoint
};

struct AnalysisOptions {
  std::vector<std::size_t> usage_thresholds{1, 10, 100};
  std::vector<int> elbow_ks{2, 4, 8, 16, 32};
  int kmeans_restarts = 8;
  int kmeans_max_iters = 100;
  std::size_t kmeans_max_points = 4096;
  std::size_t lipschitz_samples = 64;
  double lipschitz_alpha = 0.5;
  int lipschitz_delta = 200;  // nominal, scaled like the pFID deltas
  bool svg = true;
  std::uint64_t seed = 0;
};

struct AblationVariant {
  std::string name;
  std::optional<double> alpha, beta, final_scale;
  std::optional<int> delta;
  std::optional<std::string> shape;
  std::optional<double> learning_rate;
};

struct AblationSpec {
  std::vector<AblationVariant> variants;
  std::vector<std::uint64_t> seeds{1, 2, 3};
};

// One JSON document; sub-seeds not given explicitly derive from `seed`.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  SyntheticSpec dataset;
  ToyArch tokenizer;
  TrainSettings train;
  PfidConfig pfid;
  AnalysisOptions analysis;
  AblationSpec ablation;
  std::filesystem::path data_dir = "data";
  std::filesystem::path output_dir = "runs";
};

// Throws ConfigError on unknown keys, wrong types, or invalid values.
// `root_seed_override` replaces "seed" before sub-seeds are derived.
ExperimentConfig parse_config(const Json& j, std::optional<std::uint64_t> root_seed_override = {});
ExperimentConfig load_config(const std::filesystem::path& path, std::optional<std::uint64_t> root_seed_override = {});

// Fully resolved config (derived seeds filled in); hashing input.
Json config_to_json(const ExperimentConfig& cfg);
std::string config_hash(const ExperimentConfig& cfg);

// Training schedule with delta scaling and total_steps applied for arch K.
TrainConfig effective_train_config(const ExperimentConfig& cfg);

struct RunOptions {
  std::optional<std::filesystem::path> checkpoint;
  bool overwrite = false;
  int threads = 1;
};

struct RunResult {
  std::filesystem::path run_dir;
  Json manifest;
};

RunResult cmd_gen_data(const ExperimentConfig& cfg, const RunOptions& opt = {});
RunResult cmd_train(const ExperimentConfig& cfg, const RunOptions& opt = {});
RunResult cmd_eval(const ExperimentConfig& cfg, const RunOptions& opt);
RunResult cmd_ablate(const ExperimentConfig& cfg, const RunOptions& opt = {});
RunResult cmd_analyze(const ExperimentConfig& cfg, const RunOptions& opt);

// Maps the error taxonomy onto CLI exit codes (0, 2, 3, 4).
int exit_code_for(const std::exception& e);

}  // namespace robustlat
