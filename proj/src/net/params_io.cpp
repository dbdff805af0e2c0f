// SPDX-License-Identifier: Apache-2.0
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

#include "daam/data.hpp"
#include "daam/hash.hpp"
#include "daam/net.hpp"

namespace daam {

namespace {

using nlohmann::json;

constexpr std::uint16_t kParamsVersion = 1;

json config_json(const BackboneConfig &c) {
  return json{{"channels", c.channels},
              {"strides", c.strides},
              {"embed_dim", c.embed_dim},
              {"reduction", c.reduction},
              {"image_height", c.image_height},
              {"image_width", c.image_width}};
}

bool is_target_head(const std::string &name) {
  return param_group(name) == "tgt_id";
}

} // namespace

std::string backbone_config_to_json(const BackboneConfig &config) {
  return config_json(config).dump();
}

BackboneConfig backbone_config_from_json(const std::string &text) {
  BackboneConfig c;
  try {
    const auto j = json::parse(text);
    if (!j.is_object())
      throw ConfigError("backbone config: expected a JSON object");
    const std::set<std::string> known{"channels",  "strides",
                                      "embed_dim", "reduction",
                                      "image_height", "image_width"};
    for (const auto &[key, value] : j.items())
      if (!known.count(key))
        throw ConfigError("backbone config: unknown field \"" + key + "\"");
    auto get = [&](const char *key, auto &field) {
      if (j.contains(key))
        field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("channels", c.channels);
    get("strides", c.strides);
    get("embed_dim", c.embed_dim);
    get("reduction", c.reduction);
    get("image_height", c.image_height);
    get("image_width", c.image_width);
  } catch (const json::exception &e) {
    throw ConfigError(std::string("backbone config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string serialize_params(const DaamParams &params) {
  auto &mut = const_cast<DaamParams &>(params);
  json entries = json::array();
  std::vector<Tensor> payload;
  for (const auto &nt : params.learnable()) {
    entries.push_back(
        {{"name", nt.name}, {"shape", nt.tensor.shape()}, {"kind", "param"}});
    payload.push_back(nt.tensor);
  }
  for (const auto &b : mut.buffers()) {
    entries.push_back({{"name", b.name},
                       {"shape", Shape{b.values->size()}},
                       {"kind", "buffer"}});
    payload.push_back(Tensor({b.values->size()}, *b.values));
  }
  const json manifest{{"config", config_json(params.config)},
                      {"entries", entries}};
  const std::string text = manifest.dump();

  std::ostringstream out(std::ios::binary);
  io::write_magic(out, "DPRM");
  io::write_u16(out, kParamsVersion);
  io::write_u32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto &t : payload)
    write_tensor(out, t);
  return out.str();
}

LoadResult deserialize_params(const std::string &bytes, DaamParams &params) {
  std::istringstream in(bytes, std::ios::binary);
  io::expect_magic(in, "DPRM", "params");
  const auto version = io::read_u16(in);
  if (version != kParamsVersion)
    throw FormatError("params: unsupported version " + std::to_string(version));
  const auto len = io::read_u32(in);
  std::string text(len, '\0');
  if (!in.read(text.data(), len))
    throw FormatError("params: truncated manifest");
  json manifest;
  try {
    manifest = json::parse(text);
  } catch (const json::exception &e) {
    throw FormatError(std::string("params manifest: ") + e.what());
  }
  if (manifest.at("config") != config_json(params.config))
    throw FormatError("params: backbone configuration mismatch");

  std::map<std::string, Tensor> stored;
  for (const auto &e : manifest.at("entries")) {
    Tensor t = read_tensor(in);
    if (t.shape() != e.at("shape").get<Shape>())
      throw FormatError("params: payload shape disagrees with manifest for " +
                        e.at("name").get<std::string>());
    stored.emplace(e.at("name").get<std::string>(), std::move(t));
  }
  if (in.peek() != std::char_traits<char>::eof())
    throw FormatError("params: trailing bytes after payload");

  LoadResult result;
  // Validate every shape before touching the destination.
  for (const auto &nt : params.learnable()) {
    auto it = stored.find(nt.name);
    if (it == stored.end())
      throw FormatError("params: missing tensor " + nt.name);
    if (it->second.shape() != nt.tensor.shape()) {
      if (is_target_head(nt.name)) {
        result.target_head_reinitialized = true;
        continue;
      }
      throw FormatError("params: shape mismatch for " + nt.name + ": stored " +
                        shape_str(it->second.shape()) + ", expected " +
                        shape_str(nt.tensor.shape()));
    }
  }
  for (const auto &b : params.buffers()) {
    auto it = stored.find(b.name);
    if (it == stored.end() || it->second.numel() != b.values->size())
      throw FormatError("params: missing or mis-sized buffer " + b.name);
  }

  for (auto &nt : params.learnable()) {
    if (result.target_head_reinitialized && is_target_head(nt.name))
      continue;
    const auto &src = stored.at(nt.name).data();
    std::copy(src.begin(), src.end(), nt.tensor.data().begin());
  }
  for (auto &b : params.buffers()) {
    const auto &src = stored.at(b.name).data();
    std::copy(src.begin(), src.end(), b.values->begin());
  }
  return result;
}

void save_params(const DaamParams &params, const std::filesystem::path &path) {
  const std::string bytes = serialize_params(params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

LoadResult load_params(const std::filesystem::path &path, DaamParams &params) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_params(ss.str(), params);
}

std::string params_hash(const DaamParams &params) {
  return hex64(fnv1a64(serialize_params(params)));
}

} // namespace daam
