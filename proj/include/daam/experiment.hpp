// SPDX-License-Identifier: Apache-2.0
/**
 * @file   experiment.hpp
 * @brief  One resolved experiment configuration plus the artifact layout of
 *         a run directory.
 *
 * Run directory layout:
 *   config.json            resolved ExperimentConfig (includes "hash")
 *   data/<split>.drid      the four generated splits
 *   data/manifest.json     config hash and per-split manifests
 *   checkpoints/iter_NN.dckp
 *   metrics.csv            one row per evaluated iteration
 *   train_log.csv          per-epoch mean losses
 *   params.dprm            final parameters
 *   report.json            final report
 */
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "daam/data.hpp"
#include "daam/eval.hpp"
#include "daam/net.hpp"
#include "daam/trainer.hpp"

namespace daam {

struct ExperimentConfig {
  /// The one seed of the run; copied into the generator and trainer.
  std::uint64_t seed = 1;
  std::string out = "runs/default";
  GenConfig gen;
  BackboneConfig backbone;
  TrainConfig train;

  /// Copies `seed` into gen/train and checks every part.
  void resolve();
};

/// Pretty-printed JSON of every field plus the content hash.
std::string experiment_to_json(const ExperimentConfig &config);
/// Unknown fields and a sub-config seed differing from the top-level seed
/// throw ConfigError. The "hash" field is ignored when present.
ExperimentConfig experiment_from_json(const std::string &text);
/// FNV-1a over every result-affecting field (the output directory is
/// excluded), as 16 hex digits.
std::string experiment_hash(const ExperimentConfig &config);

inline constexpr std::array<const char *, 4> kSplitNames{
    "source_train", "target_train", "target_query", "target_gallery"};

/// Writes the four splits and manifest.json (generator config, per-file
/// hashes) under `dir`.
void save_generated(const GeneratedData &data, const std::filesystem::path &dir,
                    const GenConfig &config, const std::string &config_hash);
/// Throws FormatError / IntegrityError on missing or corrupt files.
GeneratedData load_generated(const std::filesystem::path &dir);
/// IntegrityError when a loaded split was generated under another config.
void check_generated(const GeneratedData &data, const GenConfig &config);
/// Same check against the generator config recorded in manifest.json.
void check_generated(const std::filesystem::path &dir, const GenConfig &config);

struct WeightStats {
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
};

struct RunResult {
  std::vector<MetricsReport> metrics;
  std::string params_hash;
  std::size_t clusters = 0;
  AttentionContrast attention;
  /// Confidence weights of the last weak-label refresh.
  WeightStats weights;
  double seconds = 0.0;
};

struct RunHooks {
  std::function<void(const std::string &)> log;
  /// Continue from the newest checkpoint in the run directory.
  bool resume = false;
};

/// Trains per `config`; with a non-empty `dir` writes checkpoints, CSVs,
/// the final parameters and report.json there.
RunResult run_training(const ExperimentConfig &config,
                       const GeneratedData &data,
                       const std::filesystem::path &dir,
                       const RunHooks &hooks = {});

std::string run_report_json(const ExperimentConfig &config,
                            const RunResult &result);

/// Newest checkpoints/iter_NN.dckp of a run directory, or empty.
std::filesystem::path latest_checkpoint(const std::filesystem::path &dir);
std::filesystem::path checkpoint_path(const std::filesystem::path &dir,
                                      long iteration);

/// Writes `bytes` to `path` via a temporary file and rename.
void write_file_atomic(const std::filesystem::path &path,
                       const std::string &bytes);
std::string read_file(const std::filesystem::path &path);

} // namespace daam
