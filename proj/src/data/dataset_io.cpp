// SPDX-License-Identifier: Apache-2.0
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "daam/data.hpp"

namespace daam {

namespace {

using nlohmann::json;

constexpr std::uint16_t kDatasetVersion = 1;

std::size_t dtn1_bytes(const Shape &shape) {
  return 4 + 4 + 4 * shape.size() + 8 * shape_numel(shape);
}

SplitRole role_from_string(const std::string &s) {
  if (s == "train")
    return SplitRole::train;
  if (s == "query")
    return SplitRole::query;
  if (s == "gallery")
    return SplitRole::gallery;
  throw FormatError("dataset: unknown split role \"" + s + "\"");
}

json manifest_to_json(const DatasetManifest &m) {
  return json{{"n_identities", m.n_identities},
              {"n_cameras", m.n_cameras},
              {"samples_per_identity", m.samples_per_identity},
              {"height", m.height},
              {"width", m.width},
              {"seed", m.seed},
              {"delta", m.delta},
              {"role", to_string(m.role)},
              {"domain", to_string(m.domain)},
              {"identity_offset", m.identity_offset},
              {"n_samples", m.n_samples},
              {"images_offset", m.images_offset},
              {"labels_offset", m.labels_offset},
              {"latents_offset", m.latents_offset},
              {"payload_bytes", m.payload_bytes},
              {"latent_dim", kIdentityLatentDim},
              {"domain_factor_dim", std::size_t{kDomainFactorCount}}};
}

DatasetManifest manifest_from_json(const json &j) {
  DatasetManifest m;
  try {
    m.n_identities = j.at("n_identities").get<std::size_t>();
    m.n_cameras = j.at("n_cameras").get<std::size_t>();
    m.samples_per_identity = j.at("samples_per_identity").get<std::size_t>();
    m.height = j.at("height").get<std::size_t>();
    m.width = j.at("width").get<std::size_t>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.delta = j.at("delta").get<double>();
    m.role = role_from_string(j.at("role").get<std::string>());
    const auto dom = j.at("domain").get<std::string>();
    if (dom != "source" && dom != "target")
      throw FormatError("dataset: unknown domain \"" + dom + "\"");
    m.domain = dom == "source" ? Domain::source : Domain::target;
    m.identity_offset = j.at("identity_offset").get<std::size_t>();
    m.n_samples = j.at("n_samples").get<std::size_t>();
    m.images_offset = j.at("images_offset").get<std::size_t>();
    m.labels_offset = j.at("labels_offset").get<std::size_t>();
    m.latents_offset = j.at("latents_offset").get<std::size_t>();
    m.payload_bytes = j.at("payload_bytes").get<std::size_t>();
    if (j.at("latent_dim").get<std::size_t>() != kIdentityLatentDim ||
        j.at("domain_factor_dim").get<std::size_t>() != kDomainFactorCount)
      throw FormatError("dataset: unsupported latent layout");
  } catch (const json::exception &e) {
    throw FormatError(std::string("dataset manifest: ") + e.what());
  }
  return m;
}

} // namespace

std::string serialize_dataset(const Dataset &dataset) {
  DatasetManifest m = dataset.manifest;
  const std::size_t n = dataset.samples.size();
  m.n_samples = n;
  const Shape image_shape{m.height, m.width, 3};
  m.images_offset = 0;
  m.labels_offset = n * dtn1_bytes(image_shape);
  m.latents_offset = m.labels_offset + n * 12;
  m.payload_bytes = m.latents_offset +
                    dtn1_bytes({n, kIdentityLatentDim}) +
                    dtn1_bytes({n, kDomainFactorCount});

  std::ostringstream out(std::ios::binary);
  io::write_magic(out, "DRID");
  io::write_u16(out, kDatasetVersion);
  const std::string manifest = manifest_to_json(m).dump();
  io::write_u32(out, static_cast<std::uint32_t>(manifest.size()));
  out.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));

  for (const auto &s : dataset.samples) {
    if (s.image.shape() != image_shape)
      throw DimensionError("dataset: image shape " + shape_str(s.image.shape()) +
                           " differs from manifest " + shape_str(image_shape));
    write_tensor(out, s.image);
  }
  for (const auto &s : dataset.samples) {
    io::write_u32(out, s.identity_id);
    io::write_u32(out, s.camera_id);
    io::write_u32(out, static_cast<std::uint32_t>(s.domain));
  }
  Tensor latents({n, kIdentityLatentDim});
  Tensor factors({n, std::size_t{kDomainFactorCount}});
  for (std::size_t i = 0; i < n; ++i) {
    const auto &s = dataset.samples[i];
    if (s.identity_latent.size() != kIdentityLatentDim ||
        s.domain_factors.size() != kDomainFactorCount)
      throw DimensionError("dataset: sample latent has wrong length");
    std::copy(s.identity_latent.begin(), s.identity_latent.end(),
              latents.data().begin() + i * kIdentityLatentDim);
    std::copy(s.domain_factors.begin(), s.domain_factors.end(),
              factors.data().begin() + i * kDomainFactorCount);
  }
  write_tensor(out, latents);
  write_tensor(out, factors);
  return out.str();
}

Dataset deserialize_dataset(const std::string &bytes) {
  std::istringstream in(bytes, std::ios::binary);
  io::expect_magic(in, "DRID", "dataset");
  const auto version = io::read_u16(in);
  if (version != kDatasetVersion)
    throw FormatError("dataset: unsupported version " + std::to_string(version));
  const auto len = io::read_u32(in);
  std::string manifest(len, '\0');
  if (!in.read(manifest.data(), len))
    throw FormatError("dataset: truncated manifest");
  json j;
  try {
    j = json::parse(manifest);
  } catch (const json::exception &e) {
    throw FormatError(std::string("dataset manifest: ") + e.what());
  }
  Dataset ds;
  ds.manifest = manifest_from_json(j);
  const auto &m = ds.manifest;

  const std::size_t header = 4 + 2 + 4 + len;
  const std::size_t payload = bytes.size() - header;
  const Shape image_shape{m.height, m.width, 3};
  const std::size_t expected = m.n_samples * (dtn1_bytes(image_shape) + 12) +
                               dtn1_bytes({m.n_samples, kIdentityLatentDim}) +
                               dtn1_bytes({m.n_samples, kDomainFactorCount});
  if (m.n_samples == 0 || payload != expected || m.payload_bytes != payload)
    throw IntegrityError("dataset: manifest declares " +
                         std::to_string(m.n_samples) + " samples (" +
                         std::to_string(expected) + " bytes) but payload holds " +
                         std::to_string(payload) + " bytes");

  ds.samples.resize(m.n_samples);
  for (auto &s : ds.samples) {
    s.image = read_tensor(in);
    if (s.image.shape() != image_shape)
      throw IntegrityError("dataset: image shape mismatch");
  }
  for (auto &s : ds.samples) {
    s.identity_id = io::read_u32(in);
    s.camera_id = io::read_u32(in);
    const auto dom = io::read_u32(in);
    if (dom > 1)
      throw FormatError("dataset: bad domain tag");
    s.domain = static_cast<Domain>(dom);
    if (s.identity_id >= m.n_identities)
      throw IntegrityError("dataset: identity id out of range");
  }
  Tensor latents = read_tensor(in);
  Tensor factors = read_tensor(in);
  if (latents.shape() != Shape{m.n_samples, kIdentityLatentDim} ||
      factors.shape() != Shape{m.n_samples, kDomainFactorCount})
    throw IntegrityError("dataset: latent block shape mismatch");
  for (std::size_t i = 0; i < m.n_samples; ++i) {
    auto &s = ds.samples[i];
    s.identity_latent.assign(latents.data().begin() + i * kIdentityLatentDim,
                             latents.data().begin() +
                                 (i + 1) * kIdentityLatentDim);
    s.domain_factors.assign(factors.data().begin() + i * kDomainFactorCount,
                            factors.data().begin() +
                                (i + 1) * kDomainFactorCount);
  }
  return ds;
}

void save_dataset(const Dataset &dataset, const std::filesystem::path &path) {
  const std::string bytes = serialize_dataset(dataset);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out)
    throw std::runtime_error("write failed for " + path.string());
}

Dataset load_dataset(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_dataset(ss.str());
}

std::string gen_config_to_json(const GenConfig &c) {
  json j{{"n_source_identities", c.n_source_identities},
         {"n_target_identities", c.n_target_identities},
         {"n_eval_identities", c.n_eval_identities},
         {"samples_per_identity", c.samples_per_identity},
         {"eval_samples_per_identity", c.eval_samples_per_identity},
         {"queries_per_identity", c.queries_per_identity},
         {"n_cameras", c.n_cameras},
         {"height", c.height},
         {"width", c.width},
         {"seed", c.seed},
         {"delta", c.delta},
         {"pixel_noise", c.pixel_noise},
         {"illumination_jitter", c.illumination_jitter}};
  return j.dump(2);
}

GenConfig gen_config_from_json(const std::string &text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception &e) {
    throw ConfigError(std::string("GenConfig: ") + e.what());
  }
  if (!j.is_object())
    throw ConfigError("GenConfig: expected a JSON object");
  GenConfig c;
  const std::set<std::string> known{
      "n_source_identities", "n_target_identities", "n_eval_identities",
      "samples_per_identity", "eval_samples_per_identity",
      "queries_per_identity", "n_cameras", "height", "width", "seed", "delta",
      "pixel_noise", "illumination_jitter"};
  for (const auto &[key, value] : j.items())
    if (!known.count(key))
      throw ConfigError("GenConfig: unknown field \"" + key + "\"");
  try {
    auto get = [&](const char *key, auto &field) {
      if (j.contains(key))
        field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("n_source_identities", c.n_source_identities);
    get("n_target_identities", c.n_target_identities);
    get("n_eval_identities", c.n_eval_identities);
    get("samples_per_identity", c.samples_per_identity);
    get("eval_samples_per_identity", c.eval_samples_per_identity);
    get("queries_per_identity", c.queries_per_identity);
    get("n_cameras", c.n_cameras);
    get("height", c.height);
    get("width", c.width);
    get("seed", c.seed);
    get("delta", c.delta);
    get("pixel_noise", c.pixel_noise);
    get("illumination_jitter", c.illumination_jitter);
  } catch (const json::exception &e) {
    throw ConfigError(std::string("GenConfig: ") + e.what());
  }
  c.validate();
  return c;
}

} // namespace daam
