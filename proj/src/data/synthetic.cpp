// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <array>
#include <cmath>
#include <random>

#include "daam/data.hpp"

namespace daam {

namespace {

// Body parts in normalized (row, col) coordinates: head, upper torso, lower
// torso, legs. Each part gets its own identity colour.
struct Part {
  double r0, r1, c0, c1;
};
constexpr std::array<Part, 4> kBody{{
    {0.0625, 0.1875, 0.375, 0.625},
    {0.1875, 0.4375, 0.25, 0.75},
    {0.4375, 0.625, 0.25, 0.75},
    {0.625, 0.9375, 0.25, 0.75},
}};

std::size_t to_pixel(double f, std::size_t extent) {
  return static_cast<std::size_t>(std::lround(f * static_cast<double>(extent)));
}

// Part index covering (y, x) for a body shifted by (dy, dx), or -1.
int body_part_at(long y, long x, long dy, long dx, std::size_t h,
                 std::size_t w) {
  const long by = y - dy, bx = x - dx;
  for (std::size_t p = 0; p < kBody.size(); ++p) {
    const auto &part = kBody[p];
    if (by >= static_cast<long>(to_pixel(part.r0, h)) &&
        by < static_cast<long>(to_pixel(part.r1, h)) &&
        bx >= static_cast<long>(to_pixel(part.c0, w)) &&
        bx < static_cast<long>(to_pixel(part.c1, w)))
      return static_cast<int>(p);
  }
  return -1;
}

// Fixed map from the identity latent to the 12 part colour logits.
const std::vector<double> &appearance_matrix() {
  static const std::vector<double> m = [] {
    std::mt19937_64 rng(0x5eedULL);
    std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(double(kIdentityLatentDim)));
    std::vector<double> v(kBody.size() * 3 * kIdentityLatentDim);
    for (auto &x : v)
      x = n(rng);
    return v;
  }();
  return m;
}

std::array<double, 12> part_colours(const std::vector<double> &z) {
  const auto &m = appearance_matrix();
  std::array<double, 12> out{};
  for (std::size_t k = 0; k < out.size(); ++k) {
    double a = 0.0;
    for (std::size_t j = 0; j < kIdentityLatentDim; ++j)
      a += m[k * kIdentityLatentDim + j] * z[j];
    out[k] = 1.0 / (1.0 + std::exp(-1.5 * a));
  }
  return out;
}

constexpr double kClutter = 0.2;

struct DomainStyle {
  std::array<double, 3> texture_colour;
  std::array<double, 3> base_shift;
  double gain;
  double bias;
  std::array<double, 3> cast;
  bool checker;
  /// Standard deviation of per-sample random cell colours in the background.
  double clutter;
};

DomainStyle domain_style(Domain d, double delta) {
  if (d == Domain::source)
    return {{0.8, 0.5, 0.2}, {0.05 * delta, 0.0, -0.05 * delta}, 1.0, 0.0,
            {0.0, 0.0, 0.0}, false, kClutter * delta};
  return {{0.2, 0.6, 0.9},
          {-0.08 * delta, 0.02 * delta, 0.1 * delta},
          1.0 - 0.2 * delta,
          0.06 * delta,
          {-0.06 * delta, 0.0, 0.06 * delta},
          true,
          kClutter * delta};
}

double texture(const DomainStyle &s, std::size_t y, std::size_t x) {
  const std::size_t cell = s.checker ? (y / 2 + x / 2) : (y / 2);
  return cell % 2 ? 1.0 : -1.0;
}

std::uint64_t split_seed(std::uint64_t seed, Domain d, SplitRole r,
                         std::size_t identity_offset) {
  std::uint64_t h = seed * 0x9E3779B97F4A7C15ULL;
  h ^= (static_cast<std::uint64_t>(d) + 1) * 0xC2B2AE3D27D4EB4FULL;
  h ^= (static_cast<std::uint64_t>(r) + 7) * 0x165667B19E3779F9ULL;
  h ^= (identity_offset + 13) * 0xD6E8FEB86659FD93ULL;
  return h;
}

SampleRecord render(const GenConfig &cfg, Domain domain,
                    const std::vector<double> &z, std::uint32_t identity,
                    std::uint32_t camera, std::mt19937_64 &rng) {
  const std::size_t h = cfg.height, w = cfg.width;
  std::uniform_int_distribution<int> pose(-1, 1);
  std::normal_distribution<double> unit(0.0, 1.0);

  SampleRecord rec;
  rec.identity_id = identity;
  rec.camera_id = camera;
  rec.domain = domain;
  rec.identity_latent = z;
  const long dy = pose(rng), dx = pose(rng);
  const double camera_gain =
      1.0 + 0.04 * (static_cast<double>(camera % 3) - 1.0);
  const double gain_jitter = 1.0 + cfg.illumination_jitter * unit(rng);
  const double bg_offset = 0.05 * unit(rng);

  const DomainStyle style = domain_style(domain, cfg.delta);
  const double gain = style.gain * gain_jitter * camera_gain;
  rec.domain_factors = {static_cast<double>(dy), static_cast<double>(dx), gain,
                        bg_offset};

  std::vector<double> cells;
  if (style.clutter > 0.0) {
    cells.resize(((h + 1) / 2) * ((w + 1) / 2) * 3);
    // Source clutter varies per row pair, target clutter per 2x2 cell.
    for (auto &v : cells)
      v = style.clutter * unit(rng);
  }

  const auto colours = part_colours(z);
  rec.image = Tensor({h, w, 3});
  auto px = rec.image.data();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const int part = body_part_at(static_cast<long>(y), static_cast<long>(x),
                                    dy, dx, h, w);
      for (std::size_t c = 0; c < 3; ++c) {
        double base;
        if (part >= 0) {
          base = colours[static_cast<std::size_t>(part) * 3 + c];
        } else {
          base = 0.5 + bg_offset + style.base_shift[c] +
                 cfg.delta * 0.25 * style.texture_colour[c] *
                     texture(style, y, x);
          if (!cells.empty())
            base += cells[((y / 2) * ((w + 1) / 2) +
                           (style.checker ? x / 2 : 0)) *
                              3 +
                          c];
        }
        // Gain and bias are global illumination; the colour cast stays off
        // the body.
        const double v = gain * base + style.bias +
                         (part >= 0 ? 0.0 : style.cast[c]) +
                         cfg.pixel_noise * unit(rng);
        px[(y * w + x) * 3 + c] = std::clamp(v, 0.0, 1.0);
      }
    }
  return rec;
}

} // namespace

std::string to_string(Domain d) {
  return d == Domain::source ? "source" : "target";
}

std::string to_string(SplitRole r) {
  switch (r) {
  case SplitRole::train:
    return "train";
  case SplitRole::query:
    return "query";
  case SplitRole::gallery:
    return "gallery";
  }
  return "?";
}

void GenConfig::validate() const {
  auto need = [](bool ok, const std::string &msg) {
    if (!ok)
      throw ConfigError("GenConfig: " + msg);
  };
  need(n_source_identities >= 2, "n_source_identities must be >= 2");
  need(n_target_identities >= 2, "n_target_identities must be >= 2");
  need(n_eval_identities >= 2, "n_eval_identities must be >= 2");
  need(samples_per_identity >= 2, "samples_per_identity must be >= 2");
  need(n_cameras >= 2, "n_cameras must be >= 2");
  need(queries_per_identity >= 1, "queries_per_identity must be >= 1");
  need(eval_samples_per_identity > queries_per_identity,
       "eval_samples_per_identity must exceed queries_per_identity");
  need(height >= 4 && width >= 4, "image extents must be at least 4x4");
  need(delta >= 0.0, "delta must be non-negative");
  need(pixel_noise >= 0.0 && illumination_jitter >= 0.0,
       "noise levels must be non-negative");
}

std::vector<std::size_t> Dataset::camera_histogram() const {
  std::vector<std::size_t> hist(manifest.n_cameras, 0);
  for (const auto &s : samples) {
    if (s.camera_id >= hist.size())
      hist.resize(s.camera_id + 1, 0);
    ++hist[s.camera_id];
  }
  return hist;
}

Dataset generate_split(const GenConfig &config, Domain domain, SplitRole role,
                       std::size_t n_identities,
                       std::size_t samples_per_identity,
                       std::size_t identity_offset) {
  if (n_identities < 1 || samples_per_identity < 1)
    throw ConfigError("generate_split: empty split");
  Dataset ds;
  auto &m = ds.manifest;
  m.n_identities = n_identities;
  m.n_cameras = config.n_cameras;
  m.samples_per_identity = samples_per_identity;
  m.height = config.height;
  m.width = config.width;
  m.seed = config.seed;
  m.delta = config.delta;
  m.role = role;
  m.domain = domain;
  m.identity_offset = identity_offset;

  // Latents depend only on (seed, global identity) so query and gallery of
  // the same identity share them.
  std::mt19937_64 rng(split_seed(config.seed, domain, role, identity_offset));
  for (std::size_t id = 0; id < n_identities; ++id) {
    std::mt19937_64 id_rng(config.seed * 0x2545F4914F6CDD1DULL +
                           identity_offset + id + 1);
    std::normal_distribution<double> unit(0.0, 1.0);
    std::vector<double> z(kIdentityLatentDim);
    for (auto &v : z)
      v = unit(id_rng);
    for (std::size_t j = 0; j < samples_per_identity; ++j) {
      const std::size_t k = id * samples_per_identity + j;
      ds.samples.push_back(render(config, domain, z,
                                  static_cast<std::uint32_t>(id),
                                  static_cast<std::uint32_t>(k % config.n_cameras),
                                  rng));
    }
  }
  m.n_samples = ds.samples.size();
  return ds;
}

GeneratedData generate(const GenConfig &config) {
  config.validate();
  GeneratedData out;
  const std::size_t src_off = 0;
  const std::size_t tgt_off = config.n_source_identities;
  const std::size_t eval_off = tgt_off + config.n_target_identities;
  out.source_train =
      generate_split(config, Domain::source, SplitRole::train,
                     config.n_source_identities, config.samples_per_identity,
                     src_off);
  out.target_train =
      generate_split(config, Domain::target, SplitRole::train,
                     config.n_target_identities, config.samples_per_identity,
                     tgt_off);

  // Query takes the first samples of each eval identity; the remainder form
  // the gallery. Round-robin cameras make the next sample a different camera.
  Dataset eval =
      generate_split(config, Domain::target, SplitRole::query,
                     config.n_eval_identities, config.eval_samples_per_identity,
                     eval_off);
  out.target_query.manifest = eval.manifest;
  out.target_gallery.manifest = eval.manifest;
  out.target_query.manifest.samples_per_identity = config.queries_per_identity;
  out.target_gallery.manifest.samples_per_identity =
      config.eval_samples_per_identity - config.queries_per_identity;
  out.target_gallery.manifest.role = SplitRole::gallery;
  for (std::size_t i = 0; i < eval.samples.size(); ++i) {
    const std::size_t j = i % config.eval_samples_per_identity;
    if (j < config.queries_per_identity)
      out.target_query.samples.push_back(std::move(eval.samples[i]));
    else
      out.target_gallery.samples.push_back(std::move(eval.samples[i]));
  }
  out.target_query.manifest.n_samples = out.target_query.samples.size();
  out.target_gallery.manifest.n_samples = out.target_gallery.samples.size();
  return out;
}

std::vector<bool> foreground_mask(const SampleRecord &sample,
                                  std::size_t height, std::size_t width) {
  const long dy = std::lround(sample.domain_factors.at(kPoseDy));
  const long dx = std::lround(sample.domain_factors.at(kPoseDx));
  std::vector<bool> mask(height * width, false);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      mask[y * width + x] = body_part_at(static_cast<long>(y),
                                         static_cast<long>(x), dy, dx, height,
                                         width) >= 0;
  return mask;
}

Tensor stack_images(const Dataset &dataset,
                    const std::vector<std::size_t> &indices) {
  const std::size_t h = dataset.manifest.height, w = dataset.manifest.width;
  Tensor out({indices.size(), h, w, 3});
  auto dst = out.data();
  const std::size_t stride = h * w * 3;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    auto src = dataset.samples.at(indices[i]).image.data();
    std::copy(src.begin(), src.end(), dst.begin() + i * stride);
  }
  return out;
}

} // namespace daam
