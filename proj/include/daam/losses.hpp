// SPDX-License-Identifier: Apache-2.0
/**
 * @file   losses.hpp
 * @brief  Training objectives on a mixed source/target batch.
 *
 * Each term is averaged over the samples it sums over (whole batch for the
 * domain-similarity, domain-specific and orthogonality terms; source rows for
 * the source identity term; target rows for the weighted target term).
 * Probabilities are clamped into [eps, 1 - eps] before every log.
 */
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "daam/data.hpp"
#include "daam/net.hpp"

namespace daam {

inline constexpr double kProbEps = 1e-12;

/// mean_i -log p_occ_i over every sample of both domains.
Tensor domain_similarity_loss(const Tensor &p_occ);

/// mean_i -log p(y_i | x_i); every row is a source sample.
Tensor reid_source_loss(const Tensor &p_src_id,
                        std::span<const std::size_t> labels);

/// sum_i w_i * -log p(y~_i | x_i), divided by the number of rows.
Tensor reid_target_loss(const Tensor &p_tgt_id,
                        std::span<const std::size_t> weak_labels,
                        std::span<const double> weights);

/// mean over rows of -log p(domain_i | x_i).
Tensor domain_specific_loss(const Tensor &p_domain,
                            std::span<const Domain> domains);

/// mean_i (f_sh . f_sp) / (|f_sh|^2 |f_sp|^2); with `cosine` the norms are
/// not squared. Norms are clamped below at 1e-12.
Tensor orthogonality_loss(const Tensor &f_sh, const Tensor &f_sp,
                          bool cosine = false);

/// Per-row supervision for a mixed batch. `labels` holds y^s for source rows
/// and the weak label for target rows; `weights` is read for target rows.
struct BatchLossInputs {
  std::vector<Domain> domains;
  std::vector<std::size_t> labels;
  std::vector<double> weights;
};

struct LossOptions {
  bool domain_similarity = true;
  bool domain_specific = true;
  bool orthogonality = true;
  /// false replaces every target weight by 1.
  bool target_weights = true;
  bool orth_cosine = false;
  /// Source pretraining: only the source identity term.
  bool pretrain = false;
};

struct LossBreakdown {
  double ds = 0.0;
  double reid_s = 0.0;
  double reid_t = 0.0;
  double dsp = 0.0;
  double orth = 0.0;
  double total = 0.0;
  std::size_t n_source = 0;
  std::size_t n_target = 0;
  /// Batch had no source rows, so reid_s is 0 by convention.
  bool no_source = false;
  /// Batch lacked one domain, so the domain-specific term is degenerate.
  bool single_domain = false;
};

struct TotalLoss {
  Tensor total; // differentiable scalar
  LossBreakdown breakdown;
};

TotalLoss total_loss(const ForwardArtifacts &fa, const BatchLossInputs &batch,
                     const LossOptions &options);

/// CSV header and row for the training log:
/// iteration,epoch,step,l_ds,l_reid_s,l_reid_t,l_dsp,l_orth,l_total
std::string loss_csv_header();
std::string loss_csv_row(std::size_t iteration, std::size_t epoch,
                         std::size_t step, const LossBreakdown &b);

} // namespace daam
