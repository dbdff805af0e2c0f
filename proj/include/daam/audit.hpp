// SPDX-License-Identifier: Apache-2.0
/**
 * @file   audit.hpp
 * @brief  Finite-difference audit of every differentiable op, each loss term
 *         and the full network under the total training objective.
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "daam/grad_check.hpp"

namespace daam {

struct AuditOptions {
  double eps = 1e-6;
  double tol = 1e-4;
  /// Absolute floor for the op and loss cases.
  double abs_floor = 1e-7;
  /// Absolute floor for the full-network cases. Conv biases feeding a
  /// train-mode batch norm have an exactly zero gradient, so their central
  /// differences are pure rounding noise.
  double network_abs_floor = 1e-4;
  /// Entries checked per parameter tensor of the main network case; 0 checks
  /// all of them.
  std::size_t network_entries_per_tensor = 0;
  /// Same for the loss-option variants of the network.
  std::size_t variant_entries_per_tensor = 0;
  std::uint64_t seed = 1;
};

struct AuditCase {
  std::string name;
  GradCheckReport report;
  double seconds = 0.0;
};

struct AuditReport {
  std::vector<AuditCase> cases;
  double seconds = 0.0;

  bool passed() const;
  double max_rel_error() const;
  const AuditCase *worst() const;
};

AuditReport gradient_audit(const AuditOptions &options = {});

} // namespace daam
