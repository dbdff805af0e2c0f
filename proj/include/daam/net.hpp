// SPDX-License-Identifier: Apache-2.0
/**
 * @file   net.hpp
 * @brief  Backbone, domain adaptive attention, shared/specific branches and
 *         their classifier heads.
 *
 * Data flow for a batch of images [n, H, W, 3]:
 *
 *   F     = backbone(images)                      [n, h, w, c]
 *   S     = spatial attention (unsquashed)        [n, h, w, 1]
 *   C     = channel attention                     [n, c]
 *   A     = sigmoid(S x C)                        [n, h, w, c], in (0, 1)
 *   F_sh  = A * F,  F_sp = F - F_sh
 *   f_sh  = ReLU(BN(GAP(F_sh) W_sh))              [n, d]
 *   f_sp  = ReLU(BN(GAP(F_sp) W_sp))              [n, d]
 *   p_occ = sigmoid(f_sh w_o + b_o)               [n, 1]
 *   p_src_id, p_tgt_id = softmax heads on f_sh    [n, N_ids], [n, K]
 *   p_domain = softmax head on f_sp               [n, 2]
 *
 * Matrices act on row vectors, so an FC layer written W in R^{out x in} is
 * stored here as its transpose [in, out]. The channel attention matrices keep
 * their [out, in] layout and are transposed on use.
 *
 * Parameter file ("DPRM"):
 *   "DPRM" | u16 version | u32 manifest length | manifest JSON |
 *   one DTN1 tensor per manifest entry, in manifest order
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "daam/grad_check.hpp"
#include "daam/ops.hpp"
#include "daam/tensor.hpp"

namespace daam {

struct BackboneConfig {
  std::vector<std::size_t> channels{8, 16, 32};
  std::vector<std::size_t> strides{1, 1, 1};
  std::size_t embed_dim = 32;
  std::size_t reduction = 4;
  std::size_t image_height = 16;
  std::size_t image_width = 8;

  std::size_t feature_channels() const { return channels.back(); }
  /// Feature-map extents (h, w) produced for the configured image size.
  std::pair<std::size_t, std::size_t> feature_extent() const;
  void validate() const;
  bool operator==(const BackboneConfig &) const = default;
};

struct HeadSizes {
  std::size_t n_source_ids = 2;
  std::size_t n_clusters = 2;
};

enum class Mode { train, eval };

struct ConvBlock {
  Tensor kernel; // [3, 3, c_in, c_out]
  Tensor bias;   // [c_out]
  BatchNorm bn;
  std::size_t stride = 1;
};

struct DaamParams {
  BackboneConfig config;
  std::vector<ConvBlock> backbone;

  Tensor spatial_kernel; // [3, 3, 1, 1], stride 2
  Tensor spatial_bias;   // [1]
  Tensor scale_kernel;   // [1, 1, 1, 1]
  Tensor scale_bias;     // [1]
  Tensor channel_w0;     // [c/r, c]
  Tensor channel_w1;     // [c, c/r]

  Tensor dsh_fc; // [c, d]
  BatchNorm dsh_bn;
  Tensor dsp_fc; // [c, d]
  BatchNorm dsp_bn;

  Tensor occ_w, occ_b;       // [d, 1], [1]
  Tensor src_id_w, src_id_b; // [d, N_ids], [N_ids]
  Tensor tgt_id_w, tgt_id_b; // [d, K], [K]
  Tensor domain_w, domain_b; // [d, 2], [2]

  /// Every learnable tensor with a dotted name; the prefix before the first
  /// dot of the name after "head." identifies its group.
  std::vector<NamedTensor> learnable() const;

  struct Buffer {
    std::string name;
    std::vector<double> *values;
  };
  /// Batch-norm running statistics.
  std::vector<Buffer> buffers();

  std::size_t n_source_ids() const { return src_id_b.numel(); }
  std::size_t n_clusters() const { return tgt_id_b.numel(); }

  /// Deep copy with independent storage.
  DaamParams clone() const;
};

/// Parameter group of a learnable name: backbone, attention, dsh, dsp, occ,
/// src_id, tgt_id or domain.
std::string param_group(const std::string &name);

/// He-normal weights N(0, 2 / fan_in), zero biases, unit BN scale.
DaamParams init_params(const BackboneConfig &config, const HeadSizes &heads,
                       std::uint64_t seed);

/// Replaces the target-identity head with a fresh [d, K] layer.
void reinit_target_head(DaamParams &params, std::size_t n_clusters,
                        std::mt19937_64 &rng);

struct ForwardOptions {
  Mode mode = Mode::train;
  /// When false A is held at 0.5 everywhere (no learned split).
  bool attention = true;
  /// Skips the domain-specific branch and its head (source pretraining).
  bool domain_specific = true;
};

struct AttentionOutput {
  Tensor spatial; // raw S, [n, h, w, 1]
  Tensor channel; // C, [n, c]
  Tensor raw;     // S x C, [n, h, w, c]
  Tensor A;
  Tensor F_sh;
  Tensor F_sp;
};

struct HeadOutputs {
  Tensor p_occ;    // [n, 1]
  Tensor p_src_id; // [n, N_ids]
  Tensor p_tgt_id; // [n, K]
  Tensor p_domain; // [n, 2]; empty scalar when the DSP branch is skipped
};

struct ForwardArtifacts {
  Tensor F;
  AttentionOutput attention;
  Tensor f_sh;
  Tensor f_sp;
  HeadOutputs heads;
  bool has_domain_specific = false;
};

Tensor backbone_forward(const Tensor &images, DaamParams &params, Mode mode);
Tensor spatial_attention(const Tensor &F, const DaamParams &params);
Tensor channel_attention(const Tensor &F, const Tensor &w0, const Tensor &w1);
AttentionOutput attention_forward(const Tensor &F, const DaamParams &params,
                                  bool enabled = true);
Tensor dsh_branch(const Tensor &F_sh, DaamParams &params, Mode mode);
Tensor dsp_branch(const Tensor &F_sp, DaamParams &params, Mode mode);
HeadOutputs heads_forward(const Tensor &f_sh, const Tensor *f_sp,
                          const DaamParams &params);

ForwardArtifacts forward(const Tensor &images, DaamParams &params,
                         const ForwardOptions &options);

// Persistence ---------------------------------------------------------------

struct LoadResult {
  /// True when the stored target head had a different K; the caller's
  /// freshly initialised head was kept.
  bool target_head_reinitialized = false;
};

std::string serialize_params(const DaamParams &params);
/// Restores into `params`, whose configuration and head sizes define the
/// expected shapes.
LoadResult deserialize_params(const std::string &bytes, DaamParams &params);
void save_params(const DaamParams &params, const std::filesystem::path &path);
LoadResult load_params(const std::filesystem::path &path, DaamParams &params);

/// FNV-1a over the serialized parameters, as 16 hex digits.
std::string params_hash(const DaamParams &params);

std::string backbone_config_to_json(const BackboneConfig &config);
/// Rejects unknown fields and invalid configurations with ConfigError.
BackboneConfig backbone_config_from_json(const std::string &text);

} // namespace daam
