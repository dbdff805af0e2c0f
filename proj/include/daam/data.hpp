// SPDX-License-Identifier: Apache-2.0
/**
 * @file   data.hpp
 * @brief  Synthetic two-domain person-retrieval datasets.
 *
 * Each identity is a latent appearance vector rendered as a coloured body
 * silhouette. Domains differ only in background texture and global
 * illumination (gain, bias, colour cast), scaled by the shift magnitude
 * `delta`; the identity pattern itself is never altered. With delta = 0
 * the two domains are identically distributed.
 *
 * Dataset file ("DRID"):
 *   "DRID" | u16 version | u32 manifest length | manifest JSON |
 *   N x DTN1 image | N x (u32 identity, u32 camera, u32 domain) |
 *   DTN1 identity latents [N, L] | DTN1 domain factors [N, 4]
 * Manifest offsets are relative to the first byte after the manifest.
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "daam/tensor.hpp"

namespace daam {

class ConfigError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Sample count or payload disagrees with the manifest.
class IntegrityError : public FormatError {
public:
  using FormatError::FormatError;
};

enum class Domain : std::uint32_t { source = 0, target = 1 };
enum class SplitRole { train, query, gallery };

std::string to_string(Domain d);
std::string to_string(SplitRole r);

struct GenConfig {
  std::size_t n_source_identities = 32;
  std::size_t n_target_identities = 32;
  std::size_t n_eval_identities = 16;
  std::size_t samples_per_identity = 8;
  std::size_t eval_samples_per_identity = 6;
  std::size_t queries_per_identity = 1;
  std::size_t n_cameras = 4;
  std::size_t height = 16;
  std::size_t width = 8;
  std::uint64_t seed = 1;
  double delta = 1.0;
  double pixel_noise = 0.03;
  /// Per-sample multiplicative illumination jitter (standard deviation).
  double illumination_jitter = 0.08;

  void validate() const;
};

/// Offsets into the domain_factors vector of a sample.
enum DomainFactor : std::size_t {
  kPoseDy = 0,
  kPoseDx = 1,
  kIlluminationGain = 2,
  kBackgroundOffset = 3,
  kDomainFactorCount = 4,
};

inline constexpr std::size_t kIdentityLatentDim = 8;

struct SampleRecord {
  Tensor image; // [H, W, 3], values in [0, 1]
  std::uint32_t identity_id = 0;
  std::uint32_t camera_id = 0;
  Domain domain = Domain::source;
  std::vector<double> identity_latent;
  std::vector<double> domain_factors;
};

struct DatasetManifest {
  std::size_t n_identities = 0;
  std::size_t n_cameras = 0;
  std::size_t samples_per_identity = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::uint64_t seed = 0;
  double delta = 0.0;
  SplitRole role = SplitRole::train;
  Domain domain = Domain::source;
  /// identity_id + identity_offset is unique across all generated splits.
  std::size_t identity_offset = 0;
  std::size_t n_samples = 0;
  std::size_t images_offset = 0;
  std::size_t labels_offset = 0;
  std::size_t latents_offset = 0;
  std::size_t payload_bytes = 0;

  bool operator==(const DatasetManifest &) const = default;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<SampleRecord> samples;

  std::size_t size() const { return samples.size(); }
  std::vector<std::size_t> camera_histogram() const;
  std::size_t global_identity(std::size_t i) const {
    return manifest.identity_offset + samples[i].identity_id;
  }
};

struct GeneratedData {
  Dataset source_train;
  Dataset target_train;
  Dataset target_query;
  Dataset target_gallery;
};

GeneratedData generate(const GenConfig &config);

/// Generates a single split of `n_identities` identities; used by
/// generate() and handy for small fixtures.
Dataset generate_split(const GenConfig &config, Domain domain, SplitRole role,
                       std::size_t n_identities,
                       std::size_t samples_per_identity,
                       std::size_t identity_offset);

/// Ground-truth foreground (body) mask of a sample at image resolution,
/// row-major H x W.
std::vector<bool> foreground_mask(const SampleRecord &sample,
                                  std::size_t height, std::size_t width);

void save_dataset(const Dataset &dataset, const std::filesystem::path &path);
Dataset load_dataset(const std::filesystem::path &path);
std::string serialize_dataset(const Dataset &dataset);
Dataset deserialize_dataset(const std::string &bytes);

GenConfig gen_config_from_json(const std::string &text);
std::string gen_config_to_json(const GenConfig &config);

/// Batches images [i0, i1, ...] into an [n, H, W, 3] tensor.
Tensor stack_images(const Dataset &dataset,
                    const std::vector<std::size_t> &indices);

} // namespace daam
