// SPDX-License-Identifier: Apache-2.0
/**
 * @file   ops.hpp
 * @brief  Differentiable tensor operations.
 *
 * Every op records itself on the active Tape when at least one input
 * requires grad. Spatial ops use channels-last layout: a single map is
 * [h, w, c] and a batch is [n, h, w, c]. Forward results are checked for
 * NaN/inf and a NumericError naming the op is thrown on failure.
 */
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "daam/tensor.hpp"

namespace daam {

// Linear algebra -------------------------------------------------------------

/// [m,k] x [k,n] -> [m,n].
Tensor matmul(const Tensor &a, const Tensor &b);
/// 2-D transpose.
Tensor transpose(const Tensor &a);

// Elementwise with trailing-axis broadcasting (numpy rules) ------------------

Tensor add(const Tensor &a, const Tensor &b);
Tensor sub(const Tensor &a, const Tensor &b);
Tensor mul(const Tensor &a, const Tensor &b);
Tensor div(const Tensor &a, const Tensor &b);

Tensor scale(const Tensor &a, double factor);
Tensor relu(const Tensor &a);
Tensor sigmoid(const Tensor &a);
Tensor exp(const Tensor &a);
Tensor log(const Tensor &a);
Tensor sqrt(const Tensor &a);
/// Clips into [lo, hi]; the gradient is zero where clipping happened.
Tensor clamp(const Tensor &a, double lo, double hi);

// Shape ---------------------------------------------------------------------

/// Same data under a new shape with equal element count.
Tensor reshape(const Tensor &a, Shape shape);

// Reductions ----------------------------------------------------------------

/// Sum of all entries, rank-0 result.
Tensor sum(const Tensor &a);
Tensor mean(const Tensor &a);
/// Sum over the last axis: [..., k] -> [...]. Rank-1 input gives a scalar.
Tensor sum_last(const Tensor &a);
/// Row-wise inner product over the last axis.
Tensor dot(const Tensor &u, const Tensor &v);
/// Row-wise squared L2 norm over the last axis.
Tensor l2_norm_sq(const Tensor &v);
/// Softmax over the last axis, max-subtracted.
Tensor softmax(const Tensor &logits);
/// out[i] = a[i, index[i]] for a of shape [n, k].
Tensor pick(const Tensor &a, std::span<const std::size_t> index);

// Spatial -------------------------------------------------------------------

/// Cross-correlation. input [h,w,ci] or [n,h,w,ci]; kernel [k,k,ci,co].
Tensor conv2d(const Tensor &input, const Tensor &kernel, std::size_t stride,
              std::size_t padding);
/// Mean over spatial positions: [h,w,c] -> [c], [n,h,w,c] -> [n,c].
Tensor global_avg_pool_spatial(const Tensor &input);
/// Per-pixel mean over channels: [..., c] -> [..., 1].
Tensor avg_pool_channels(const Tensor &input);
/// Nearest-neighbour resize of [h',w',c] / [n,h',w',c] to target extents.
/// Source row of output row y is floor(y * h' / target_h).
Tensor upsample_nearest(const Tensor &input, std::size_t target_h,
                        std::size_t target_w);

// Batch normalization --------------------------------------------------------

/// Learnable scale/shift plus running statistics over the last axis.
struct BatchNorm {
  Tensor gamma;
  Tensor beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNorm() = default;
  explicit BatchNorm(std::size_t features);
  std::size_t features() const { return running_mean.size(); }
};

/// Normalizes each last-axis feature. Training mode uses the statistics of
/// all leading positions in `x` and updates the running estimates; eval mode
/// uses the running estimates only.
Tensor batchnorm(const Tensor &x, BatchNorm &bn, bool training);

} // namespace daam
