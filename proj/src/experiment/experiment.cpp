// SPDX-License-Identifier: Apache-2.0
#include "daam/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <optional>
#include <regex>
#include <sstream>

#include "json.hpp"

#include "daam/hash.hpp"

namespace daam {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json parse_or_throw(const std::string &text, const std::string &where) {
  try {
    return json::parse(text);
  } catch (const json::exception &e) {
    throw ConfigError(where + ": " + e.what());
  }
}

json hashed_fields(const ExperimentConfig &c) {
  json gen = json::parse(gen_config_to_json(c.gen));
  json train = json::parse(train_config_to_json(c.train));
  gen.erase("seed");
  train.erase("seed");
  return json{{"seed", c.seed},
              {"gen", gen},
              {"backbone", json::parse(backbone_config_to_json(c.backbone))},
              {"train", train}};
}

/// Sub-configs may repeat the top-level seed but not contradict it.
void take_seed(json &sub, std::uint64_t seed, const std::string &where) {
  if (!sub.contains("seed"))
    return;
  if (sub.at("seed").get<std::uint64_t>() != seed)
    throw ConfigError(where + ".seed differs from the top-level seed; set "
                              "the seed once at the top level");
  sub.erase("seed");
}

} // namespace

void ExperimentConfig::resolve() {
  gen.seed = seed;
  train.seed = seed;
  gen.validate();
  backbone.validate();
  train.validate();
  if (gen.height != backbone.image_height || gen.width != backbone.image_width)
    throw ConfigError("generator images are " + std::to_string(gen.height) +
                      "x" + std::to_string(gen.width) +
                      " but the backbone expects " +
                      std::to_string(backbone.image_height) + "x" +
                      std::to_string(backbone.image_width));
  if (out.empty())
    throw ConfigError("output directory must not be empty");
}

std::string experiment_hash(const ExperimentConfig &config) {
  return hex64(fnv1a64(hashed_fields(config).dump()));
}

std::string experiment_to_json(const ExperimentConfig &config) {
  json j = hashed_fields(config);
  j["out"] = config.out;
  j["hash"] = experiment_hash(config);
  return j.dump(2);
}

ExperimentConfig experiment_from_json(const std::string &text) {
  const json j = parse_or_throw(text, "experiment config");
  if (!j.is_object())
    throw ConfigError("experiment config: expected a JSON object");
  for (const auto &[key, value] : j.items())
    if (key != "seed" && key != "out" && key != "gen" && key != "backbone" &&
        key != "train" && key != "hash")
      throw ConfigError("experiment config: unknown field \"" + key + "\"");
  ExperimentConfig c;
  try {
    if (j.contains("seed"))
      c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("out"))
      c.out = j.at("out").get<std::string>();
  } catch (const json::exception &e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  if (j.contains("gen")) {
    json g = j.at("gen");
    take_seed(g, c.seed, "gen");
    c.gen = gen_config_from_json(g.dump());
  }
  if (j.contains("backbone"))
    c.backbone = backbone_config_from_json(j.at("backbone").dump());
  if (j.contains("train")) {
    json t = j.at("train");
    take_seed(t, c.seed, "train");
    c.train = train_config_from_json(t.dump());
  }
  c.resolve();
  return c;
}

// ---------------------------------------------------------------------------

void write_file_atomic(const fs::path &path, const std::string &bytes) {
  if (path.has_parent_path())
    fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out)
      throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out)
      throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw FormatError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void save_generated(const GeneratedData &data, const fs::path &dir,
                    const GenConfig &config, const std::string &config_hash) {
  fs::create_directories(dir);
  const std::array<const Dataset *, 4> splits{
      &data.source_train, &data.target_train, &data.target_query,
      &data.target_gallery};
  json files = json::object();
  for (std::size_t i = 0; i < splits.size(); ++i) {
    const std::string bytes = serialize_dataset(*splits[i]);
    const std::string name = std::string(kSplitNames[i]) + ".drid";
    write_file_atomic(dir / name, bytes);
    const auto &m = splits[i]->manifest;
    files[kSplitNames[i]] = {{"file", name},
                             {"bytes", bytes.size()},
                             {"fnv1a64", hex64(fnv1a64(bytes))},
                             {"role", to_string(m.role)},
                             {"domain", to_string(m.domain)},
                             {"n_identities", m.n_identities},
                             {"n_samples", m.n_samples},
                             {"camera_histogram",
                              splits[i]->camera_histogram()}};
  }
  const json manifest{{"config_hash", config_hash},
                      {"gen", json::parse(gen_config_to_json(config))},
                      {"splits", files}};
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

GeneratedData load_generated(const fs::path &dir) {
  GeneratedData d;
  const std::array<Dataset *, 4> splits{&d.source_train, &d.target_train,
                                        &d.target_query, &d.target_gallery};
  for (std::size_t i = 0; i < splits.size(); ++i) {
    const fs::path p = dir / (std::string(kSplitNames[i]) + ".drid");
    if (!fs::exists(p))
      throw FormatError("missing dataset file " + p.string() +
                        "; run `daam gen` first");
    *splits[i] = load_dataset(p);
  }
  return d;
}

void check_generated(const fs::path &dir, const GenConfig &config) {
  json manifest;
  try {
    manifest = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::exception &e) {
    throw FormatError("data manifest: " + std::string(e.what()));
  }
  if (!manifest.contains("gen") ||
      manifest.at("gen") != json::parse(gen_config_to_json(config)))
    throw IntegrityError("datasets in " + dir.string() +
                         " were generated under a different configuration");
}

void check_generated(const GeneratedData &data, const GenConfig &config) {
  struct Expect {
    const Dataset *ds;
    std::size_t ids;
    std::size_t per_id;
  };
  const std::array<Expect, 4> expect{
      Expect{&data.source_train, config.n_source_identities,
             config.samples_per_identity},
      Expect{&data.target_train, config.n_target_identities,
             config.samples_per_identity},
      Expect{&data.target_query, config.n_eval_identities, 0},
      Expect{&data.target_gallery, config.n_eval_identities, 0}};
  for (std::size_t i = 0; i < expect.size(); ++i) {
    const auto &m = expect[i].ds->manifest;
    const bool ok = m.seed == config.seed && m.delta == config.delta &&
                    m.height == config.height && m.width == config.width &&
                    m.n_cameras == config.n_cameras &&
                    m.n_identities == expect[i].ids &&
                    (expect[i].per_id == 0 ||
                     m.samples_per_identity == expect[i].per_id);
    if (!ok)
      throw IntegrityError(std::string("dataset split ") + kSplitNames[i] +
                           " was generated under a different configuration");
  }
}

// ---------------------------------------------------------------------------

fs::path checkpoint_path(const fs::path &dir, long iteration) {
  char name[32];
  std::snprintf(name, sizeof(name), "iter_%02ld.dckp", iteration);
  return dir / "checkpoints" / name;
}

fs::path latest_checkpoint(const fs::path &dir) {
  const fs::path ck = dir / "checkpoints";
  if (!fs::is_directory(ck))
    return {};
  const std::regex pattern(R"(iter_(\d+)\.dckp)");
  long best = -1;
  fs::path out;
  for (const auto &entry : fs::directory_iterator(ck)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (std::regex_match(name, m, pattern)) {
      const long it = std::stol(m[1].str());
      if (it > best) {
        best = it;
        out = entry.path();
      }
    }
  }
  return out;
}

std::string run_report_json(const ExperimentConfig &config,
                            const RunResult &r) {
  json iterations = json::array();
  for (const auto &m : r.metrics)
    iterations.push_back(json::parse(m.to_json()));
  json j{{"config_hash", experiment_hash(config)},
         {"seed", config.seed},
         {"params_hash", r.params_hash},
         {"clusters", r.clusters},
         {"seconds", r.seconds},
         {"iterations", iterations},
         {"attention",
          {{"foreground", r.attention.foreground},
           {"background", r.attention.background}}},
         {"weights",
          {{"mean", r.weights.mean},
           {"min", r.weights.min},
           {"max", r.weights.max}}}};
  if (!r.metrics.empty()) {
    j["direct_transfer"] = iterations.front();
    j["final"] = iterations.back();
  }
  return j.dump(2) + "\n";
}

RunResult run_training(const ExperimentConfig &config,
                       const GeneratedData &data, const fs::path &dir,
                       const RunHooks &hooks) {
  auto log = [&](const std::string &msg) {
    if (hooks.log)
      hooks.log(msg);
  };
  const std::string hash = experiment_hash(config);
  const bool write = !dir.empty();
  const auto t0 = std::chrono::steady_clock::now();
  if (write)
    fs::create_directories(dir / "checkpoints");

  std::optional<Trainer> trainer;
  if (write && hooks.resume) {
    const fs::path ck = latest_checkpoint(dir);
    if (!ck.empty()) {
      trainer.emplace(
          Trainer::resume(ck, data, config.train, hash, config.backbone));
      log("resumed from " + ck.string());
    }
  }
  if (!trainer)
    trainer.emplace(data, config.train, config.backbone);
  log("training with K=" + std::to_string(trainer->clusters()) +
      " clusters, config " + hash);

  trainer->run([&](const Trainer &t) {
    const auto &m = t.state().metrics.back();
    const double elapsed = std::chrono::duration<double>(
                               std::chrono::steady_clock::now() - t0)
                               .count();
    char line[160];
    std::snprintf(line, sizeof(line),
                  "iteration %ld: mAP %.4f cmc1 %.4f cmc5 %.4f (%.1fs)",
                  m.iteration, m.mAP, m.cmc1, m.cmc5, elapsed);
    log(line);
    if (write) {
      t.save_checkpoint(checkpoint_path(dir, m.iteration), hash);
      write_file_atomic(dir / "metrics.csv", metrics_csv(t.state().metrics));
      write_file_atomic(dir / "train_log.csv",
                        train_log_csv(t.state().loss_history));
    }
  });

  auto &state = trainer->state();
  RunResult r;
  r.metrics = state.metrics;
  r.params_hash = params_hash(state.params);
  r.clusters = trainer->clusters();
  r.attention = attention_contrast(data.target_query, state.params,
                                   !config.train.ablate.no_attention);
  const auto &w = state.clusters.weights;
  if (!w.empty()) {
    double sum = 0.0;
    for (double v : w)
      sum += v;
    r.weights = {sum / static_cast<double>(w.size()),
                 *std::min_element(w.begin(), w.end()),
                 *std::max_element(w.begin(), w.end())};
  }
  r.seconds = std::chrono::duration<double>(
                  std::chrono::steady_clock::now() - t0)
                  .count();
  if (write) {
    save_params(state.params, dir / "params.dprm");
    write_file_atomic(dir / "metrics.csv", metrics_csv(state.metrics));
    write_file_atomic(dir / "train_log.csv", train_log_csv(state.loss_history));
    write_file_atomic(dir / "report.json", run_report_json(config, r));
  }
  return r;
}

} // namespace daam
