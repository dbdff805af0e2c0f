// SPDX-License-Identifier: Apache-2.0
/**
 * @file   eval.hpp
 * @brief  Retrieval metrics (mAP, CMC), linear domain probes and attention
 *         heatmap export.
 *
 * Ranking uses Euclidean distance between embeddings. Gallery entries that
 * share both identity and camera with the query are dropped before ranking;
 * queries left without any true match are excluded and counted. Among equal
 * distances non-matches are ranked first, so scores never depend on gallery
 * order.
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "daam/data.hpp"
#include "daam/net.hpp"

namespace daam {

struct FeatureSet {
  Tensor f_sh; // [n, d]
  Tensor f_sp; // [n, d]
};

struct ExtractOptions {
  std::size_t batch_size = 64;
  bool attention = true;
};

/// Eval-mode embeddings for every sample, in dataset order.
FeatureSet extract_features(const Dataset &dataset, DaamParams &params,
                            const ExtractOptions &options = {});

struct RetrievalMeta {
  std::vector<std::size_t> identities;
  std::vector<std::size_t> cameras;
};

RetrievalMeta retrieval_meta(const Dataset &dataset);

struct RankingResult {
  /// Indices into the original query list of the scored queries.
  std::vector<std::size_t> queries;
  /// Per scored query: remaining gallery indices by increasing distance.
  std::vector<std::vector<std::size_t>> order;
  std::vector<std::vector<double>> distances;
  std::vector<double> ap;
  /// Per scored query: 1-based rank of the first true match.
  std::vector<std::size_t> first_match;
};

struct MetricsReport {
  double mAP = 0.0;
  double cmc1 = 0.0;
  double cmc5 = 0.0;
  double cmc10 = 0.0;
  std::size_t n_queries = 0;
  std::size_t n_gallery = 0;
  std::size_t excluded_queries = 0;
  long iteration = -1;
  std::optional<double> probe_sh;
  std::optional<double> probe_sp;
  /// Adjusted Rand index of the iteration's weak labels against the true
  /// target identities.
  std::optional<double> label_ari;

  std::string to_json() const;
  static MetricsReport from_json(const std::string &text);
};

struct RankOptions {
  bool cosine = false;
};

/// Scores every query against the gallery. Throws std::invalid_argument when
/// no query has a usable match.
RankingResult rank_and_score(const Tensor &query, const RetrievalMeta &qmeta,
                             const Tensor &gallery, const RetrievalMeta &gmeta,
                             MetricsReport &report,
                             const RankOptions &options = {});

/// Fraction of scored queries whose first true match is within rank k.
double cmc_at(const RankingResult &r, std::size_t k);

/// Average precision given the sorted relevance of a ranked list.
double average_precision(const std::vector<bool> &relevant_in_rank_order);

/// Held-out accuracy of a logistic separator trained on a seeded 70% split
/// of standardized features. With `groups` (one per sample) the split is
/// over groups, so no group contributes to both sides. Throws when only one
/// domain is present.
double domain_probe(const Tensor &features, const std::vector<Domain> &domains,
                    std::uint64_t seed,
                    const std::vector<std::size_t> &groups = {});

struct AttentionMaps {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> shared;   // channel mean of A, row-major h x w
  std::vector<double> specific; // channel mean of 1 - A
  Tensor A;                     // [h, w, c]
};

AttentionMaps attention_maps(const Tensor &image, DaamParams &params,
                             bool attention = true);

/// Writes <prefix>_shared.pgm, <prefix>_specific.pgm and <prefix>_A.dtn.
AttentionMaps export_attention(const Tensor &image, DaamParams &params,
                               const std::filesystem::path &prefix,
                               bool attention = true);

/// Min-max normalised 8-bit binary PGM; a constant map becomes mid-grey.
void write_pgm(const std::filesystem::path &path,
               const std::vector<double> &values, std::size_t height,
               std::size_t width);

struct AttentionContrast {
  double foreground = 0.0;
  double background = 0.0;
};

/// Mean shared-attention weight over ground-truth body and background pixels,
/// after upsampling the channel-mean map to image resolution.
AttentionContrast attention_contrast(const Dataset &dataset, DaamParams &params,
                                     bool attention = true);

/// iteration,mAP,cmc1,cmc5,cmc10,probe_sh,probe_sp,label_ari
std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsReport &r);

} // namespace daam
