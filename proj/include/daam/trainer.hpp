// SPDX-License-Identifier: Apache-2.0
/**
 * @file   trainer.hpp
 * @brief  Source pretraining, iterative weak-label refresh and joint
 *         optimisation with SGD + momentum, plus exact checkpoint/resume.
 *
 * Training is a resumable state machine advanced one optimizer step at a
 * time. Every epoch's batch plan is derived from (seed, phase, iteration,
 * epoch), so a run restored from a mid-epoch checkpoint replays exactly the
 * batches an uninterrupted run would have seen.
 *
 * Checkpoint layout ("DCKP", little-endian):
 *   "DCKP" | u16 version | str config hash | str DPRM params |
 *   u32 count | count x (str name | DTN1 momentum) | str RNG state |
 *   str JSON progress (counters, cluster model, histories)
 * where str is u32 length + bytes.
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "daam/data.hpp"
#include "daam/eval.hpp"
#include "daam/losses.hpp"
#include "daam/net.hpp"
#include "daam/weak_labels.hpp"

namespace daam {

/// Step schedule with milestones stated for `reference_epochs`; they scale
/// linearly with the actual epoch count of a phase.
struct LrSchedule {
  /// Losses are batch means here, so this matches 1e-3 on batch sums of 32.
  double base_lr = 0.03;
  std::vector<double> milestones{20.0, 120.0};
  double gamma = 0.1;
  double reference_epochs = 200.0;
};

double lr_at(double epoch, const LrSchedule &schedule,
             std::size_t epochs_in_phase);

struct Ablations {
  bool no_ds = false;
  bool no_dsp = false;
  bool no_orth = false;
  bool no_weights = false;
  bool no_attention = false;

  bool any() const {
    return no_ds || no_dsp || no_orth || no_weights || no_attention;
  }
  /// Applies a CLI name (no-ds, no-dsp, no-orth, no-weights, no-attention).
  void enable(const std::string &name);
  std::vector<std::string> names() const;
};

struct TrainConfig {
  std::size_t iterations = 7;
  std::size_t epochs_per_iteration = 40;
  std::size_t pretrain_epochs = 40;
  std::size_t batch_size = 32;
  /// Share of each joint batch drawn from the source set.
  double source_fraction = 0.5;
  /// Schedule of the joint phase; restarts every iteration.
  LrSchedule lr;
  /// Schedule of source pretraining.
  LrSchedule pretrain_lr;
  double momentum = 0.9;
  /// Number of target clusters; 0 derives it from the target identity count.
  std::size_t clusters = 0;
  std::uint64_t seed = 1;
  Ablations ablate;
  KMeansOptions kmeans;
  bool orth_cosine = false;
  /// Cluster and weight target samples on L2-normalised f_sh. Raw f_sh
  /// distances put nearly every confidence weight close to zero.
  bool unit_norm_clustering = true;
  std::size_t eval_batch = 64;
  /// Rank the gallery by cosine instead of Euclidean distance.
  bool cosine_ranking = false;
  /// Run the linear domain probes at every evaluation.
  bool probes = true;

  void validate() const;
  /// Per-batch (source, target) counts of a full joint batch.
  std::pair<std::size_t, std::size_t> batch_mix() const;
};

std::string train_config_to_json(const TrainConfig &config);
/// Rejects unknown keys with ConfigError.
TrainConfig train_config_from_json(const std::string &text);

using MomentumBuffers = std::map<std::string, std::vector<double>>;

/// v = momentum * v + g; theta -= lr * v for every tensor, reading gradients
/// from the tensors' grad buffers. A non-finite gradient throws NumericError
/// naming the step, parameter and gradient norm before anything is updated.
void sgd_step(const std::vector<NamedTensor> &params, MomentumBuffers &buffers,
              double lr, double momentum, std::size_t step);

struct BatchPlan {
  std::vector<std::size_t> source;
  std::vector<std::size_t> target;
};

/// Source-only batches over one permutation of the source set.
std::vector<BatchPlan> pretrain_epoch_plan(std::size_t n_source,
                                           std::size_t batch_size,
                                           std::uint64_t seed,
                                           std::size_t epoch);

/// Mixed batches covering the larger set once; the smaller set is sampled
/// with replacement. Both sets are covered by permutation when they need the
/// same number of batches.
std::vector<BatchPlan> joint_epoch_plan(std::size_t n_source,
                                        std::size_t n_target,
                                        std::size_t batch_source,
                                        std::size_t batch_target,
                                        std::uint64_t seed,
                                        std::size_t iteration,
                                        std::size_t epoch);

/// Sub-seed for a named stream; stable across platforms.
std::uint64_t derive_seed(std::uint64_t seed, const std::string &stream,
                          std::size_t a = 0, std::size_t b = 0);

enum class Phase { pretrain, joint, done };
std::string to_string(Phase p);

struct LossRecord {
  Phase phase = Phase::pretrain;
  std::size_t iteration = 0;
  std::size_t epoch = 0;
  std::size_t step = 0;
  /// Mean over the epoch's batches.
  LossBreakdown mean;
};

struct TrainState {
  DaamParams params;
  MomentumBuffers momentum;
  Phase phase = Phase::pretrain;
  /// 0 during pretraining, 1-based during joint training.
  std::size_t iteration = 0;
  std::size_t epoch = 0;
  std::size_t step_in_epoch = 0;
  std::size_t global_step = 0;
  /// Weak labels of the current iteration have been computed.
  bool labels_ready = false;
  ClusterModel clusters;
  std::mt19937_64 rng;
  std::vector<LossRecord> loss_history;
  /// One report per finished phase: iteration 0 is the pretrained model.
  std::vector<MetricsReport> metrics;
  /// Running sums of the open epoch.
  LossBreakdown epoch_sum;
  std::size_t epoch_batches = 0;
};

/// Target query/gallery retrieval metrics plus optional domain probes on the
/// source and target training sets. With `clusters` the agreement of their
/// weak labels with the true target identities is recorded as well.
MetricsReport evaluate_model(const GeneratedData &data, DaamParams &params,
                             const TrainConfig &config, long iteration,
                             const ClusterModel *clusters = nullptr);

class Trainer {
public:
  /// Initialises parameters from the config seed. `data` must outlive the
  /// trainer.
  Trainer(const GeneratedData &data, TrainConfig config,
          const BackboneConfig &backbone = {});

  /// Performs the next unit of work: one optimizer step, a weak-label
  /// refresh or a phase transition. Returns false once training is done.
  bool advance();

  /// Advances until done, calling `on_report` after each evaluation.
  void run(const std::function<void(const Trainer &)> &on_report = {});

  /// Advances until `steps` more optimizer steps have run or training ends.
  void run_steps(std::size_t steps);

  const TrainState &state() const { return state_; }
  TrainState &state() { return state_; }
  const TrainConfig &config() const { return config_; }
  std::size_t clusters() const { return clusters_; }

  void save_checkpoint(const std::filesystem::path &path,
                       const std::string &config_hash) const;
  std::string checkpoint_bytes(const std::string &config_hash) const;
  /// Restores a checkpoint written under the same configuration; a hash
  /// mismatch throws ConfigError naming both hashes.
  static Trainer resume(const std::filesystem::path &path,
                        const GeneratedData &data, TrainConfig config,
                        const std::string &config_hash,
                        const BackboneConfig &backbone = {});
  static Trainer resume_bytes(const std::string &bytes,
                              const GeneratedData &data, TrainConfig config,
                              const std::string &config_hash,
                              const BackboneConfig &backbone = {});

private:
  void train_batch(const BatchPlan &batch);
  void close_epoch();
  void finish_pretrain();
  void refresh_labels();
  void finish_iteration();
  const std::vector<BatchPlan> &current_plan();

  const GeneratedData *data_;
  TrainConfig config_;
  std::size_t clusters_ = 0;
  TrainState state_;
  std::vector<BatchPlan> plan_;
  long plan_key_ = -1;
  bool report_pending_ = false;
};

/// Source-identity training accuracy of the src_id head in eval mode.
double source_train_accuracy(const Dataset &source, DaamParams &params,
                             bool attention = true);

std::string train_log_csv(const std::vector<LossRecord> &history);
std::string metrics_csv(const std::vector<MetricsReport> &reports);

} // namespace daam
