// SPDX-License-Identifier: Apache-2.0
// daam: dataset generation, training, evaluation and diagnostics.
//
// Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric
// failure. Log verbosity comes from DAAM_LOG={error,info,debug}.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "daam/audit.hpp"
#include "daam/experiment.hpp"
#include "daam/hash.hpp"

namespace fs = std::filesystem;
using namespace daam;

namespace {

enum ExitCode { kOk = 0, kConfigError = 1, kDataError = 2, kNumericError = 3 };

enum class Level { error = 0, info = 1, debug = 2 };

Level g_level = Level::info;

void log(Level level, const std::string &msg) {
  if (level > g_level)
    return;
  static const char *names[] = {"error", "info", "debug"};
  std::cerr << "[" << names[static_cast<int>(level)] << "] " << msg << "\n";
}

void init_logging() {
  const char *env = std::getenv("DAAM_LOG");
  if (env == nullptr)
    return;
  const std::string v = env;
  if (v == "error")
    g_level = Level::error;
  else if (v == "info")
    g_level = Level::info;
  else if (v == "debug")
    g_level = Level::debug;
  else
    throw ConfigError("DAAM_LOG must be error, info or debug, got '" + v +
                      "'");
}

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> iterations;
  std::optional<std::size_t> clusters;
  std::vector<std::string> ablate;
  bool force = false;
};

void add_common(CLI::App *cmd, CommonFlags &f) {
  cmd->add_option("--config", f.config, "Experiment config JSON");
  cmd->add_option("--seed", f.seed, "Seed for generation and training");
  cmd->add_option("--out", f.out, "Run directory");
  cmd->add_option("--iterations", f.iterations, "Weak-label iterations");
  cmd->add_option("--clusters", f.clusters, "Number of target clusters K");
  cmd->add_option("--ablate", f.ablate,
                  "no-ds, no-dsp, no-orth, no-weights or no-attention")
      ->take_all();
  cmd->add_flag("--force", f.force, "Overwrite artifacts of the same config");
}

ExperimentConfig load_config(const CommonFlags &f,
                             const fs::path &fallback = {}) {
  ExperimentConfig c;
  fs::path path = f.config;
  if (path.empty() && !fallback.empty() && fs::exists(fallback))
    path = fallback;
  if (!path.empty()) {
    if (!fs::exists(path))
      throw ConfigError("config file " + path.string() + " does not exist");
    c = experiment_from_json(read_file(path));
  }
  if (f.seed)
    c.seed = *f.seed;
  if (!f.out.empty())
    c.out = f.out;
  if (f.iterations)
    c.train.iterations = *f.iterations;
  if (f.clusters)
    c.train.clusters = *f.clusters;
  for (const auto &a : f.ablate)
    c.train.ablate.enable(a);
  c.resolve();
  return c;
}

/// Records the resolved config in `dir`. A directory written under another
/// config, or one that already holds `product` for this config, is refused
/// unless `force` is set.
void claim_directory(const fs::path &dir, const ExperimentConfig &cfg,
                     const fs::path &product, bool force) {
  const std::string hash = experiment_hash(cfg);
  const fs::path cfg_path = dir / "config.json";
  if (fs::exists(cfg_path) && !force) {
    std::string existing;
    try {
      existing = nlohmann::json::parse(read_file(cfg_path)).value("hash", "");
    } catch (const nlohmann::json::exception &) {
      existing = "unreadable";
    }
    if (existing != hash)
      throw ConfigError(dir.string() + " holds config " + existing +
                        " but this run is " + hash +
                        "; choose another --out or pass --force");
    if (!product.empty() && fs::exists(product))
      throw ConfigError(product.string() + " already exists for config " +
                        hash + "; pass --force to recompute");
  }
  write_file_atomic(cfg_path, experiment_to_json(cfg) + "\n");
}

GeneratedData obtain_data(const ExperimentConfig &cfg, const fs::path &dir) {
  const fs::path data_dir = dir / "data";
  if (fs::exists(data_dir / "manifest.json")) {
    check_generated(data_dir, cfg.gen);
    auto data = load_generated(data_dir);
    check_generated(data, cfg.gen);
    log(Level::debug, "loaded datasets from " + data_dir.string());
    return data;
  }
  auto data = generate(cfg.gen);
  save_generated(data, data_dir, cfg.gen, experiment_hash(cfg));
  log(Level::info, "generated datasets into " + data_dir.string());
  return data;
}

RunHooks hooks(bool resume = false) {
  RunHooks h;
  h.log = [](const std::string &m) { log(Level::info, m); };
  h.resume = resume;
  return h;
}

/// Run directory of a checkpoint stored as <run>/checkpoints/iter_NN.dckp.
fs::path run_dir_of(const fs::path &checkpoint) {
  return checkpoint.parent_path().parent_path();
}

// Commands ------------------------------------------------------------------

int cmd_gen(const CommonFlags &f) {
  const auto cfg = load_config(f);
  const fs::path dir = cfg.out;
  claim_directory(dir, cfg, dir / "data" / "manifest.json", f.force);
  const auto data = generate(cfg.gen);
  save_generated(data, dir / "data", cfg.gen, experiment_hash(cfg));
  std::cout << "wrote " << (dir / "data").string() << ": "
            << data.source_train.size() << " source, "
            << data.target_train.size() << " target train, "
            << data.target_query.size() << " query, "
            << data.target_gallery.size() << " gallery images\n";
  return kOk;
}

int cmd_train(const CommonFlags &f, bool resume) {
  const auto cfg = load_config(f);
  const fs::path dir = cfg.out;
  claim_directory(dir, cfg, dir / "report.json", f.force || resume);
  if (f.force && !resume)
    fs::remove_all(dir / "checkpoints");
  const auto data = obtain_data(cfg, dir);
  const auto r = run_training(cfg, data, dir, hooks(resume));
  const auto &first = r.metrics.front();
  const auto &last = r.metrics.back();
  std::printf("direct transfer mAP %.4f cmc1 %.4f\n", first.mAP, first.cmc1);
  std::printf("final (iteration %ld) mAP %.4f cmc1 %.4f\n", last.iteration,
              last.mAP, last.cmc1);
  std::printf("params %s, report %s\n", r.params_hash.c_str(),
              (dir / "report.json").string().c_str());
  return kOk;
}

int cmd_eval(const CommonFlags &f, const fs::path &checkpoint) {
  const fs::path run = run_dir_of(checkpoint);
  CommonFlags flags = f;
  if (flags.out.empty())
    flags.out = run.string();
  const auto cfg = load_config(flags, run / "config.json");
  const auto data = obtain_data(cfg, run);
  Trainer t = Trainer::resume(checkpoint, data, cfg.train,
                              experiment_hash(cfg), cfg.backbone);
  const long iteration =
      t.state().metrics.empty() ? -1 : t.state().metrics.back().iteration;
  const auto report =
      evaluate_model(data, t.state().params, cfg.train, iteration,
                     iteration > 0 ? &t.state().clusters : nullptr);
  std::cout << metrics_csv_header() << "\n" << metrics_csv_row(report) << "\n";
  char name[32];
  std::snprintf(name, sizeof(name), "eval_iter_%02ld.json", iteration);
  write_file_atomic(fs::path(cfg.out) / name, report.to_json() + "\n");
  return kOk;
}

int cmd_gradcheck(const CommonFlags &f, const AuditOptions &opts) {
  const auto report = gradient_audit(opts);
  std::ostringstream csv;
  csv << "case,max_rel_error,entries,seconds,status\n";
  for (const auto &c : report.cases) {
    char line[200];
    std::snprintf(line, sizeof(line), "%s,%.3e,%zu,%.3f,%s\n", c.name.c_str(),
                  c.report.max_rel_error, c.report.entries.size(), c.seconds,
                  c.report.passed() ? "pass" : "FAIL");
    csv << line;
    if (!c.report.passed() && c.report.worst())
      log(Level::error, c.name + ": worst entry " + c.report.worst()->name +
                            "[" + std::to_string(c.report.worst()->index) +
                            "] analytic " +
                            std::to_string(c.report.worst()->analytic) +
                            " numeric " +
                            std::to_string(c.report.worst()->numeric));
  }
  std::cout << csv.str();
  std::printf("max relative error %.3e over %zu cases in %.1fs: %s\n",
              report.max_rel_error(), report.cases.size(), report.seconds,
              report.passed() ? "pass" : "FAIL");
  if (!f.out.empty())
    write_file_atomic(fs::path(f.out) / "gradcheck.csv", csv.str());
  return report.passed() ? kOk : kNumericError;
}

const Dataset &split_by_name(const GeneratedData &d, const std::string &name) {
  if (name == "source_train")
    return d.source_train;
  if (name == "target_train")
    return d.target_train;
  if (name == "target_query")
    return d.target_query;
  if (name == "target_gallery")
    return d.target_gallery;
  throw ConfigError("unknown split '" + name + "'");
}

int cmd_export_attn(const CommonFlags &f, const fs::path &checkpoint,
                    const std::vector<std::size_t> &indices,
                    const std::string &split) {
  const fs::path run = run_dir_of(checkpoint);
  CommonFlags flags = f;
  if (flags.out.empty())
    flags.out = run.string();
  const auto cfg = load_config(flags, run / "config.json");
  const auto data = obtain_data(cfg, run);
  Trainer t = Trainer::resume(checkpoint, data, cfg.train,
                              experiment_hash(cfg), cfg.backbone);
  auto &params = t.state().params;
  const bool attention = !cfg.train.ablate.no_attention;
  const Dataset &ds = split_by_name(data, split);
  const fs::path out = fs::path(cfg.out) / "attention";
  fs::create_directories(out);
  for (auto i : indices) {
    if (i >= ds.size())
      throw ConfigError("sample index " + std::to_string(i) + " outside " +
                        split + " (" + std::to_string(ds.size()) +
                        " samples)");
    const auto prefix = out / (split + "_" + std::to_string(i));
    export_attention(ds.samples[i].image, params, prefix, attention);
    std::cout << "wrote " << prefix.string() << "_{shared,specific}.pgm, _A.dtn\n";
  }
  const auto c = attention_contrast(ds, params, attention);
  const nlohmann::json summary{{"split", split},
                               {"checkpoint", checkpoint.string()},
                               {"foreground_mean_A", c.foreground},
                               {"background_mean_A", c.background}};
  write_file_atomic(out / "summary.json", summary.dump(2) + "\n");
  std::printf("mean A foreground %.4f background %.4f\n", c.foreground,
              c.background);
  return kOk;
}

int cmd_sweep_k(const CommonFlags &f, const std::vector<std::size_t> &ks) {
  const auto cfg = load_config(f);
  const fs::path dir = cfg.out;
  claim_directory(dir, cfg, dir / "sweep_k.csv", f.force);
  const auto data = obtain_data(cfg, dir);
  std::string csv = "k,mAP,cmc1,cmc5,cmc10\n";
  for (auto k : ks) {
    auto ck = cfg;
    ck.train.clusters = k;
    ck.resolve();
    log(Level::info, "sweep: K=" + std::to_string(k));
    const auto r = run_training(ck, data, {}, hooks());
    const auto &m = r.metrics.back();
    char row[160];
    std::snprintf(row, sizeof(row), "%zu,%.6f,%.6f,%.6f,%.6f\n", k, m.mAP,
                  m.cmc1, m.cmc5, m.cmc10);
    csv += row;
    std::cout << row << std::flush;
    write_file_atomic(dir / "sweep_k.csv", csv);
  }
  return kOk;
}

int cmd_sweep_iters(const CommonFlags &f) {
  const auto cfg = load_config(f);
  const fs::path dir = cfg.out;
  claim_directory(dir, cfg, dir / "sweep_iters.csv", f.force);
  const auto data = obtain_data(cfg, dir);
  const auto r = run_training(cfg, data, {}, hooks());
  const std::string csv = metrics_csv(r.metrics);
  write_file_atomic(dir / "sweep_iters.csv", csv);
  std::cout << csv;
  return kOk;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Domain adaptive attention re-identification experiments"};
  app.require_subcommand(1);

  CommonFlags flags;
  bool resume = false;
  std::string checkpoint;
  std::vector<std::size_t> indices{0};
  std::string split = "target_query";
  std::vector<std::size_t> k_list{2, 4, 8, 16, 32};
  AuditOptions audit;

  auto *gen = app.add_subcommand("gen", "Generate and save the datasets");
  add_common(gen, flags);

  auto *train = app.add_subcommand("train", "Pretrain and run weak-label "
                                            "iterations");
  add_common(train, flags);
  train->add_flag("--resume", resume, "Continue from the newest checkpoint");

  auto *eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(eval, flags);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();

  auto *gradcheck =
      app.add_subcommand("gradcheck", "Finite-difference gradient audit");
  add_common(gradcheck, flags);
  gradcheck->add_option("--eps", audit.eps, "Central-difference step");
  gradcheck->add_option("--tol", audit.tol, "Maximum relative error");

  auto *export_attn =
      app.add_subcommand("export-attn", "Write attention heatmaps");
  add_common(export_attn, flags);
  export_attn->add_option("--checkpoint", checkpoint, "Checkpoint file")
      ->required();
  export_attn->add_option("--indices", indices, "Sample indices")
      ->delimiter(',');
  export_attn->add_option("--split", split, "Dataset split")
      ->check(CLI::IsMember({"source_train", "target_train", "target_query",
                             "target_gallery"}));

  auto *sweep_k = app.add_subcommand("sweep-k", "Final mAP per cluster count");
  add_common(sweep_k, flags);
  sweep_k->add_option("--k-list", k_list, "Cluster counts")->delimiter(',');

  auto *sweep_iters =
      app.add_subcommand("sweep-iters", "Metrics after every iteration");
  add_common(sweep_iters, flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    init_logging();
    if (*gen)
      return cmd_gen(flags);
    if (*train)
      return cmd_train(flags, resume);
    if (*eval)
      return cmd_eval(flags, checkpoint);
    if (*gradcheck)
      return cmd_gradcheck(flags, audit);
    if (*export_attn)
      return cmd_export_attn(flags, checkpoint, indices, split);
    if (*sweep_k)
      return cmd_sweep_k(flags, k_list);
    if (*sweep_iters)
      return cmd_sweep_iters(flags);
  } catch (const ConfigError &e) {
    log(Level::error, std::string("config error: ") + e.what());
    return kConfigError;
  } catch (const NumericError &e) {
    log(Level::error, std::string("numeric failure: ") + e.what());
    return kNumericError;
  } catch (const FormatError &e) {
    log(Level::error, std::string("data error: ") + e.what());
    return kDataError;
  } catch (const DimensionError &e) {
    log(Level::error, std::string("config error: ") + e.what());
    return kConfigError;
  } catch (const std::exception &e) {
    log(Level::error, std::string("data error: ") + e.what());
    return kDataError;
  }
  return kOk;
}
