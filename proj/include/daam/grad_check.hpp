// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "daam/tensor.hpp"

namespace daam {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct GradCheckOptions {
  double eps = 1e-6;
  double tol = 1e-5;
  /// Gradients whose analytic and numeric magnitudes are both below this
  /// are compared absolutely instead of relatively.
  double abs_floor = 1e-7;
  /// 0 checks every entry; otherwise a seeded sample of this many per tensor.
  std::size_t max_entries_per_tensor = 0;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::string name;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  double tol = 0.0;

  bool passed() const { return max_rel_error < tol; }
  const GradCheckEntry *worst() const;
  std::vector<GradCheckEntry> failures() const;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences. `f` must read the given tensors and be deterministic; the
/// inputs are temporarily marked requires_grad and perturbed in place.
GradCheckReport grad_check(const std::function<Tensor()> &f,
                           const std::vector<NamedTensor> &inputs,
                           const GradCheckOptions &options = {});

double relative_error(double analytic, double numeric, double abs_floor);

} // namespace daam
