// SPDX-License-Identifier: Apache-2.0
/**
 * @file   weak_labels.hpp
 * @brief  k-means++ clustering of target embeddings, weak-label assignment
 *         and distance-based confidence weights.
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "daam/tensor.hpp"

namespace daam {

using Points = std::vector<std::vector<double>>;

struct KMeansOptions {
  std::size_t max_iter = 100;
  double tol = 1e-6;
  /// Independent seedings; the lowest final inertia wins.
  std::size_t n_init = 10;
  /// Follow Lloyd with single-point transfers that lower the inertia.
  bool refine = true;
};

struct ClusterModel {
  std::size_t k = 0;
  Points centers;
  std::vector<std::size_t> labels;
  std::vector<double> weights;
  double inertia = 0.0;
  std::uint64_t seed = 0;
  /// Inertia after every assignment step of the winning run.
  std::vector<double> inertia_history;
  std::size_t iterations = 0;
  bool converged = false;
};

/// k-means++ seeding followed by Lloyd iterations and, optionally, improving
/// single-point transfers. Empty clusters are moved to the point farthest
/// from its own center. Throws std::invalid_argument
/// when there are fewer points than clusters and NumericError on non-finite
/// input.
ClusterModel kmeans_pp(const Points &points, std::size_t k, std::uint64_t seed,
                       const KMeansOptions &options = {});

double squared_distance(std::span<const double> a, std::span<const double> b);

/// Index of the nearest center; ties go to the lowest index.
std::size_t assign_weak_label(std::span<const double> f, const Points &centers);

/// 1 / (1 + exp(d2)) with the exponent capped at 700, floored at 1e-30.
double confidence_weight_from_sq(double squared_distance);
double confidence_weight(std::span<const double> f,
                         std::span<const double> center);

/// Clusters the rows of `features` ([n, d]) and labels and weights every row.
ClusterModel relabel_dataset(const Tensor &features, std::size_t k,
                             std::uint64_t seed,
                             const KMeansOptions &options = {});

/// Rows of an [n, d] tensor as points.
Points tensor_rows(const Tensor &t);

/// Cluster count scaled from 650 clusters for 751 identities.
std::size_t default_cluster_count(std::size_t n_target_identities);

/// Adjusted Rand index between two labelings; 1 means identical partitions
/// up to renaming.
double adjusted_rand_index(std::span<const std::size_t> a,
                           std::span<const std::size_t> b);

std::string cluster_model_to_json(const ClusterModel &model);
ClusterModel cluster_model_from_json(const std::string &text);

} // namespace daam
