// SPDX-License-Identifier: Apache-2.0
#include "daam/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "daam/hash.hpp"
#include "json.hpp"

namespace daam {

using nlohmann::json;

double lr_at(double epoch, const LrSchedule &s, std::size_t epochs_in_phase) {
  const double scale =
      static_cast<double>(epochs_in_phase) / s.reference_epochs;
  double lr = s.base_lr;
  for (double m : s.milestones)
    if (epoch >= m * scale)
      lr *= s.gamma;
  return lr;
}

void Ablations::enable(const std::string &name) {
  if (name == "no-ds")
    no_ds = true;
  else if (name == "no-dsp")
    no_dsp = true;
  else if (name == "no-orth")
    no_orth = true;
  else if (name == "no-weights")
    no_weights = true;
  else if (name == "no-attention")
    no_attention = true;
  else
    throw ConfigError("unknown ablation '" + name +
                      "' (expected no-ds, no-dsp, no-orth, no-weights or "
                      "no-attention)");
}

std::vector<std::string> Ablations::names() const {
  std::vector<std::string> out;
  if (no_ds)
    out.push_back("no-ds");
  if (no_dsp)
    out.push_back("no-dsp");
  if (no_orth)
    out.push_back("no-orth");
  if (no_weights)
    out.push_back("no-weights");
  if (no_attention)
    out.push_back("no-attention");
  return out;
}

std::pair<std::size_t, std::size_t> TrainConfig::batch_mix() const {
  const auto bs = static_cast<std::size_t>(
      std::lround(static_cast<double>(batch_size) * source_fraction));
  return {bs, batch_size - bs};
}

void TrainConfig::validate() const {
  if (batch_size < 2)
    throw ConfigError("batch_size must be at least 2");
  if (!(source_fraction > 0.0 && source_fraction < 1.0))
    throw ConfigError("source_fraction must lie in (0, 1)");
  const auto [bs, bt] = batch_mix();
  if (bs < 1 || bt < 1)
    throw ConfigError("batch mix must give at least one sample per domain");
  if (epochs_per_iteration < 1)
    throw ConfigError("epochs_per_iteration must be positive");
  for (const auto *s : {&lr, &pretrain_lr}) {
    if (!(s->base_lr > 0.0) || !std::isfinite(s->base_lr))
      throw ConfigError("base learning rate must be positive");
    if (!(s->gamma > 0.0) || !(s->reference_epochs > 0.0))
      throw ConfigError("learning-rate gamma and reference epochs must be "
                        "positive");
  }
  if (!(momentum >= 0.0 && momentum < 1.0))
    throw ConfigError("momentum must lie in [0, 1)");
  if (eval_batch < 1)
    throw ConfigError("eval_batch must be positive");
  if (kmeans.n_init < 1 || kmeans.max_iter < 1)
    throw ConfigError("k-means needs n_init and max_iter of at least 1");
}

namespace {

json schedule_json(const LrSchedule &s) {
  return {{"base_lr", s.base_lr},
          {"milestones", s.milestones},
          {"gamma", s.gamma},
          {"reference_epochs", s.reference_epochs}};
}

void normalize_rows(Tensor &t) {
  const std::size_t n = t.dim(0), d = t.dim(1);
  auto v = t.data();
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0.0;
    for (std::size_t j = 0; j < d; ++j)
      norm += v[i * d + j] * v[i * d + j];
    norm = std::sqrt(norm);
    if (norm > 0.0)
      for (std::size_t j = 0; j < d; ++j)
        v[i * d + j] /= norm;
  }
}

void reject_unknown(const json &j, std::initializer_list<const char *> keys,
                    const std::string &where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::none_of(keys.begin(), keys.end(),
                     [&](const char *k) { return it.key() == k; }))
      throw ConfigError("unknown field '" + it.key() + "' in " + where);
}

template <class T> void read_opt(const json &j, const char *key, T &out) {
  if (j.contains(key))
    out = j.at(key).get<T>();
}

void read_schedule(const json &j, const char *key, LrSchedule &s) {
  if (!j.contains(key))
    return;
  const auto &l = j.at(key);
  reject_unknown(l, {"base_lr", "milestones", "gamma", "reference_epochs"},
                 key);
  read_opt(l, "base_lr", s.base_lr);
  read_opt(l, "milestones", s.milestones);
  read_opt(l, "gamma", s.gamma);
  read_opt(l, "reference_epochs", s.reference_epochs);
}

} // namespace

std::string train_config_to_json(const TrainConfig &c) {
  json j{{"iterations", c.iterations},
         {"epochs_per_iteration", c.epochs_per_iteration},
         {"pretrain_epochs", c.pretrain_epochs},
         {"batch_size", c.batch_size},
         {"source_fraction", c.source_fraction},
         {"lr", schedule_json(c.lr)},
         {"pretrain_lr", schedule_json(c.pretrain_lr)},
         {"momentum", c.momentum},
         {"clusters", c.clusters},
         {"seed", c.seed},
         {"ablate", c.ablate.names()},
         {"kmeans",
          {{"max_iter", c.kmeans.max_iter},
           {"tol", c.kmeans.tol},
           {"n_init", c.kmeans.n_init},
           {"refine", c.kmeans.refine}}},
         {"orth_cosine", c.orth_cosine},
         {"unit_norm_clustering", c.unit_norm_clustering},
         {"eval_batch", c.eval_batch},
         {"cosine_ranking", c.cosine_ranking},
         {"probes", c.probes}};
  return j.dump(2);
}

TrainConfig train_config_from_json(const std::string &text) {
  TrainConfig c;
  try {
    const auto j = json::parse(text);
    reject_unknown(j,
                   {"iterations", "epochs_per_iteration", "pretrain_epochs",
                    "batch_size", "source_fraction", "lr", "pretrain_lr",
                    "momentum",
                    "clusters", "seed", "ablate", "kmeans", "orth_cosine",
                    "unit_norm_clustering", "eval_batch",
                    "cosine_ranking", "probes"},
                   "train config");
    read_opt(j, "iterations", c.iterations);
    read_opt(j, "epochs_per_iteration", c.epochs_per_iteration);
    read_opt(j, "pretrain_epochs", c.pretrain_epochs);
    read_opt(j, "batch_size", c.batch_size);
    read_opt(j, "source_fraction", c.source_fraction);
    read_schedule(j, "lr", c.lr);
    read_schedule(j, "pretrain_lr", c.pretrain_lr);
    read_opt(j, "momentum", c.momentum);
    read_opt(j, "clusters", c.clusters);
    read_opt(j, "seed", c.seed);
    if (j.contains("ablate"))
      for (const auto &n : j.at("ablate"))
        c.ablate.enable(n.get<std::string>());
    if (j.contains("kmeans")) {
      const auto &k = j.at("kmeans");
      reject_unknown(k, {"max_iter", "tol", "n_init", "refine"}, "kmeans");
      read_opt(k, "max_iter", c.kmeans.max_iter);
      read_opt(k, "tol", c.kmeans.tol);
      read_opt(k, "n_init", c.kmeans.n_init);
      read_opt(k, "refine", c.kmeans.refine);
    }
    read_opt(j, "orth_cosine", c.orth_cosine);
    read_opt(j, "unit_norm_clustering", c.unit_norm_clustering);
    read_opt(j, "eval_batch", c.eval_batch);
    read_opt(j, "cosine_ranking", c.cosine_ranking);
    read_opt(j, "probes", c.probes);
  } catch (const json::exception &e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

void sgd_step(const std::vector<NamedTensor> &params, MomentumBuffers &buffers,
              double lr, double momentum, std::size_t step) {
  for (const auto &p : params) {
    const auto g = p.tensor.grad();
    double sq = 0.0;
    bool finite = true;
    for (double v : g) {
      finite &= std::isfinite(v);
      sq += v * v;
    }
    if (!finite) {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%.6g", std::sqrt(sq));
      throw NumericError("step " + std::to_string(step) +
                         ": non-finite gradient in " + p.name + " (norm " +
                         buf + ")");
    }
  }
  for (const auto &p : params) {
    const auto g = p.tensor.grad();
    auto &v = buffers[p.name];
    if (v.size() != g.size())
      v.assign(g.size(), 0.0);
    Tensor t = p.tensor;
    auto theta = t.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      v[i] = momentum * v[i] + g[i];
      theta[i] -= lr * v[i];
    }
  }
}

std::uint64_t derive_seed(std::uint64_t seed, const std::string &stream,
                          std::size_t a, std::size_t b) {
  std::string key = stream;
  for (std::uint64_t v : {seed, static_cast<std::uint64_t>(a),
                          static_cast<std::uint64_t>(b)})
    for (int i = 0; i < 8; ++i)
      key.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  return fnv1a64(key);
}

std::vector<BatchPlan> pretrain_epoch_plan(std::size_t n_source,
                                           std::size_t batch_size,
                                           std::uint64_t seed,
                                           std::size_t epoch) {
  if (n_source == 0)
    throw std::invalid_argument("pretraining needs a non-empty source set");
  std::vector<std::size_t> perm(n_source);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, "pretrain", epoch));
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<BatchPlan> plan;
  for (std::size_t i = 0; i < n_source; i += batch_size)
    plan.push_back({{perm.begin() + static_cast<long>(i),
                     perm.begin() + static_cast<long>(
                                        std::min(n_source, i + batch_size))},
                    {}});
  // a lone sample gives degenerate batch statistics
  if (plan.size() > 1 && plan.back().source.size() == 1) {
    plan[plan.size() - 2].source.push_back(plan.back().source[0]);
    plan.pop_back();
  }
  return plan;
}

std::vector<BatchPlan> joint_epoch_plan(std::size_t n_source,
                                        std::size_t n_target,
                                        std::size_t batch_source,
                                        std::size_t batch_target,
                                        std::uint64_t seed,
                                        std::size_t iteration,
                                        std::size_t epoch) {
  if (n_source == 0 || n_target == 0)
    throw std::invalid_argument("joint training needs both domains");
  if (batch_source == 0 || batch_target == 0)
    throw ConfigError("joint batches need both domains");
  std::mt19937_64 rng(derive_seed(seed, "joint", iteration, epoch));
  const std::size_t steps_s = (n_source + batch_source - 1) / batch_source;
  const std::size_t steps_t = (n_target + batch_target - 1) / batch_target;
  const std::size_t steps = std::max(steps_s, steps_t);

  auto permuted = [&](std::size_t n) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), 0);
    std::shuffle(p.begin(), p.end(), rng);
    return p;
  };
  const bool source_pass = steps_s == steps, target_pass = steps_t == steps;
  const auto perm_s = source_pass ? permuted(n_source) : std::vector<std::size_t>{};
  const auto perm_t = target_pass ? permuted(n_target) : std::vector<std::size_t>{};

  std::vector<BatchPlan> plan(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    std::size_t take_s = batch_source, take_t = batch_target;
    if (source_pass)
      take_s = std::min(batch_source, n_source - k * batch_source);
    if (target_pass)
      take_t = std::min(batch_target, n_target - k * batch_target);
    // keep the configured ratio in a short final batch
    if (source_pass && !target_pass)
      take_t = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::lround(
                 static_cast<double>(take_s * batch_target) / batch_source)));
    if (target_pass && !source_pass)
      take_s = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::lround(
                 static_cast<double>(take_t * batch_source) / batch_target)));
    for (std::size_t i = 0; i < take_s; ++i)
      plan[k].source.push_back(
          source_pass ? perm_s[k * batch_source + i]
                      : std::uniform_int_distribution<std::size_t>(
                            0, n_source - 1)(rng));
    for (std::size_t i = 0; i < take_t; ++i)
      plan[k].target.push_back(
          target_pass ? perm_t[k * batch_target + i]
                      : std::uniform_int_distribution<std::size_t>(
                            0, n_target - 1)(rng));
  }
  return plan;
}

std::string to_string(Phase p) {
  switch (p) {
  case Phase::pretrain:
    return "pretrain";
  case Phase::joint:
    return "joint";
  case Phase::done:
    return "done";
  }
  return "unknown";
}

namespace {

Phase phase_from_string(const std::string &s) {
  if (s == "pretrain")
    return Phase::pretrain;
  if (s == "joint")
    return Phase::joint;
  if (s == "done")
    return Phase::done;
  throw FormatError("unknown training phase '" + s + "'");
}

json breakdown_json(const LossBreakdown &b) {
  return {{"ds", b.ds},
          {"reid_s", b.reid_s},
          {"reid_t", b.reid_t},
          {"dsp", b.dsp},
          {"orth", b.orth},
          {"total", b.total},
          {"n_source", b.n_source},
          {"n_target", b.n_target},
          {"no_source", b.no_source},
          {"single_domain", b.single_domain}};
}

LossBreakdown breakdown_from(const json &j) {
  LossBreakdown b;
  b.ds = j.at("ds").get<double>();
  b.reid_s = j.at("reid_s").get<double>();
  b.reid_t = j.at("reid_t").get<double>();
  b.dsp = j.at("dsp").get<double>();
  b.orth = j.at("orth").get<double>();
  b.total = j.at("total").get<double>();
  b.n_source = j.at("n_source").get<std::size_t>();
  b.n_target = j.at("n_target").get<std::size_t>();
  b.no_source = j.at("no_source").get<bool>();
  b.single_domain = j.at("single_domain").get<bool>();
  return b;
}

void accumulate(LossBreakdown &sum, const LossBreakdown &b) {
  sum.ds += b.ds;
  sum.reid_s += b.reid_s;
  sum.reid_t += b.reid_t;
  sum.dsp += b.dsp;
  sum.orth += b.orth;
  sum.total += b.total;
  sum.n_source += b.n_source;
  sum.n_target += b.n_target;
}

void write_str(std::ostream &out, const std::string &s) {
  io::write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_str(std::istream &in, const char *what) {
  const std::uint32_t n = io::read_u32(in);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (static_cast<std::size_t>(in.gcount()) != n)
    throw FormatError(std::string("checkpoint truncated in ") + what);
  return s;
}

constexpr std::uint16_t kCheckpointVersion = 1;

std::size_t resolve_clusters(const GeneratedData &data, const TrainConfig &c) {
  const std::size_t k =
      c.clusters ? c.clusters
                 : default_cluster_count(data.target_train.manifest.n_identities);
  if (c.iterations > 0 && k > data.target_train.size())
    throw ConfigError("cluster count " + std::to_string(k) +
                      " exceeds the " +
                      std::to_string(data.target_train.size()) +
                      " target training samples");
  return k;
}

} // namespace

MetricsReport evaluate_model(const GeneratedData &data, DaamParams &params,
                             const TrainConfig &config, long iteration,
                             const ClusterModel *clusters) {
  const ExtractOptions opts{config.eval_batch, !config.ablate.no_attention};
  const auto q = extract_features(data.target_query, params, opts);
  const auto g = extract_features(data.target_gallery, params, opts);
  MetricsReport report;
  rank_and_score(q.f_sh, retrieval_meta(data.target_query), g.f_sh,
                 retrieval_meta(data.target_gallery), report,
                 RankOptions{config.cosine_ranking});
  report.iteration = iteration;
  if (clusters && clusters->labels.size() == data.target_train.size()) {
    std::vector<std::size_t> truth;
    truth.reserve(data.target_train.size());
    for (const auto &s : data.target_train.samples)
      truth.push_back(s.identity_id);
    report.label_ari = adjusted_rand_index(clusters->labels, truth);
  }
  if (config.probes) {
    const auto s = extract_features(data.source_train, params, opts);
    const auto t = extract_features(data.target_train, params, opts);
    const std::size_t ns = data.source_train.size(),
                      nt = data.target_train.size(), d = s.f_sh.dim(1);
    auto stack = [&](const Tensor &a, const Tensor &b) {
      Tensor out({ns + nt, d});
      std::copy(a.data().begin(), a.data().end(), out.data().begin());
      std::copy(b.data().begin(), b.data().end(),
                out.data().begin() + static_cast<long>(ns * d));
      return out;
    };
    std::vector<Domain> dom(ns, Domain::source);
    dom.resize(ns + nt, Domain::target);
    // Identities never cross domains, so the split is by identity; a
    // per-sample split would let the probe separate domains by identity.
    std::vector<std::size_t> ids;
    ids.reserve(ns + nt);
    for (std::size_t i = 0; i < ns; ++i)
      ids.push_back(data.source_train.global_identity(i));
    for (std::size_t i = 0; i < nt; ++i)
      ids.push_back(data.target_train.global_identity(i));
    const auto probe_seed = derive_seed(config.seed, "probe");
    report.probe_sh =
        domain_probe(stack(s.f_sh, t.f_sh), dom, probe_seed, ids);
    report.probe_sp =
        domain_probe(stack(s.f_sp, t.f_sp), dom, probe_seed, ids);
  }
  return report;
}

Trainer::Trainer(const GeneratedData &data, TrainConfig config,
                 const BackboneConfig &backbone)
    : data_(&data), config_(std::move(config)) {
  config_.validate();
  if (data.source_train.size() == 0)
    throw std::invalid_argument("source training set is empty");
  if (config_.iterations > 0 && data.target_train.size() == 0)
    throw std::invalid_argument("target training set is empty");
  clusters_ = resolve_clusters(data, config_);
  state_.params = init_params(
      backbone, HeadSizes{data.source_train.manifest.n_identities, clusters_},
      derive_seed(config_.seed, "init"));
  state_.rng.seed(derive_seed(config_.seed, "trainer"));
}

const std::vector<BatchPlan> &Trainer::current_plan() {
  const long key = static_cast<long>(state_.phase) * 1'000'000'000L +
                   static_cast<long>(state_.iteration) * 100'000L +
                   static_cast<long>(state_.epoch);
  if (key != plan_key_) {
    if (state_.phase == Phase::pretrain)
      plan_ = pretrain_epoch_plan(data_->source_train.size(),
                                  config_.batch_size, config_.seed,
                                  state_.epoch);
    else {
      const auto [bs, bt] = config_.batch_mix();
      plan_ = joint_epoch_plan(data_->source_train.size(),
                               data_->target_train.size(), bs, bt,
                               config_.seed, state_.iteration, state_.epoch);
    }
    plan_key_ = key;
  }
  return plan_;
}

void Trainer::train_batch(const BatchPlan &batch) {
  const bool pretrain = state_.phase == Phase::pretrain;
  const auto &src = data_->source_train;
  const auto &tgt = data_->target_train;
  const std::size_t ns = batch.source.size(), nt = batch.target.size();
  const auto &cfg = src.manifest;
  Tensor images({ns + nt, cfg.height, cfg.width, 3});
  {
    const std::size_t per = cfg.height * cfg.width * 3;
    auto dst = images.data();
    std::size_t r = 0;
    for (auto i : batch.source)
      std::copy(src.samples[i].image.data().begin(),
                src.samples[i].image.data().end(), dst.begin() + static_cast<long>(per * r++));
    for (auto i : batch.target)
      std::copy(tgt.samples[i].image.data().begin(),
                tgt.samples[i].image.data().end(), dst.begin() + static_cast<long>(per * r++));
  }
  BatchLossInputs inputs;
  for (auto i : batch.source) {
    inputs.domains.push_back(Domain::source);
    inputs.labels.push_back(src.samples[i].identity_id);
    inputs.weights.push_back(1.0);
  }
  for (auto i : batch.target) {
    inputs.domains.push_back(Domain::target);
    inputs.labels.push_back(state_.clusters.labels[i]);
    inputs.weights.push_back(state_.clusters.weights[i]);
  }

  auto learnable = state_.params.learnable();
  if (pretrain)
    std::erase_if(learnable, [](const NamedTensor &p) {
      const auto g = param_group(p.name);
      return g != "backbone" && g != "attention" && g != "dsh" &&
             g != "src_id";
    });
  for (auto &p : state_.params.learnable())
    p.tensor.zero_grad();

  LossOptions lo;
  lo.pretrain = pretrain;
  lo.domain_similarity = !config_.ablate.no_ds;
  lo.domain_specific = !config_.ablate.no_dsp;
  lo.orthogonality = !config_.ablate.no_orth;
  lo.target_weights = !config_.ablate.no_weights;
  lo.orth_cosine = config_.orth_cosine;

  Tape tape;
  TotalLoss loss;
  {
    TapeScope scope(tape);
    const auto fa = forward(images, state_.params,
                            {Mode::train, !config_.ablate.no_attention,
                             !pretrain && !config_.ablate.no_dsp});
    loss = total_loss(fa, inputs, lo);
    if (!std::isfinite(loss.breakdown.total))
      throw NumericError("step " + std::to_string(state_.global_step) +
                         ": non-finite loss in " + to_string(state_.phase));
    tape.backward(loss.total);
  }
  const std::size_t epochs =
      pretrain ? config_.pretrain_epochs : config_.epochs_per_iteration;
  const double lr = lr_at(static_cast<double>(state_.epoch),
                          pretrain ? config_.pretrain_lr : config_.lr, epochs);
  sgd_step(learnable, state_.momentum, lr, config_.momentum,
           state_.global_step);
  accumulate(state_.epoch_sum, loss.breakdown);
  ++state_.epoch_batches;
  ++state_.global_step;
  ++state_.step_in_epoch;
}

void Trainer::close_epoch() {
  LossRecord rec;
  rec.phase = state_.phase;
  rec.iteration = state_.iteration;
  rec.epoch = state_.epoch;
  rec.step = state_.global_step;
  const double n = static_cast<double>(std::max<std::size_t>(1, state_.epoch_batches));
  rec.mean = state_.epoch_sum;
  rec.mean.ds /= n;
  rec.mean.reid_s /= n;
  rec.mean.reid_t /= n;
  rec.mean.dsp /= n;
  rec.mean.orth /= n;
  rec.mean.total /= n;
  state_.loss_history.push_back(rec);
  state_.epoch_sum = {};
  state_.epoch_batches = 0;
  state_.step_in_epoch = 0;
  ++state_.epoch;
}

void Trainer::finish_pretrain() {
  state_.metrics.push_back(evaluate_model(*data_, state_.params, config_, 0));
  report_pending_ = true;
  state_.momentum.clear();
  state_.epoch = 0;
  state_.step_in_epoch = 0;
  if (config_.iterations == 0) {
    state_.phase = Phase::done;
    return;
  }
  state_.phase = Phase::joint;
  state_.iteration = 1;
  state_.labels_ready = false;
}

void Trainer::refresh_labels() {
  auto feats = extract_features(
      data_->target_train, state_.params,
      {config_.eval_batch, !config_.ablate.no_attention});
  if (config_.unit_norm_clustering)
    normalize_rows(feats.f_sh);
  state_.clusters =
      relabel_dataset(feats.f_sh, clusters_,
                      derive_seed(config_.seed, "cluster", state_.iteration),
                      config_.kmeans);
  reinit_target_head(state_.params, clusters_, state_.rng);
  state_.momentum.clear();
  state_.labels_ready = true;
}

void Trainer::finish_iteration() {
  state_.metrics.push_back(evaluate_model(*data_, state_.params, config_,
                                         static_cast<long>(state_.iteration),
                                         &state_.clusters));
  report_pending_ = true;
  state_.epoch = 0;
  state_.step_in_epoch = 0;
  state_.labels_ready = false;
  if (state_.iteration >= config_.iterations) {
    state_.phase = Phase::done;
    return;
  }
  ++state_.iteration;
}

bool Trainer::advance() {
  switch (state_.phase) {
  case Phase::done:
    return false;
  case Phase::pretrain:
    if (state_.epoch >= config_.pretrain_epochs) {
      finish_pretrain();
      return true;
    }
    break;
  case Phase::joint:
    if (!state_.labels_ready) {
      refresh_labels();
      return true;
    }
    if (state_.epoch >= config_.epochs_per_iteration) {
      finish_iteration();
      return true;
    }
    break;
  }
  const auto &plan = current_plan();
  train_batch(plan[state_.step_in_epoch]);
  if (state_.step_in_epoch == plan.size())
    close_epoch();
  return true;
}

void Trainer::run(const std::function<void(const Trainer &)> &on_report) {
  while (advance())
    if (report_pending_) {
      report_pending_ = false;
      if (on_report)
        on_report(*this);
    }
  if (report_pending_) {
    report_pending_ = false;
    if (on_report)
      on_report(*this);
  }
}

void Trainer::run_steps(std::size_t steps) {
  const std::size_t target = state_.global_step + steps;
  while (state_.global_step < target && advance()) {
  }
}

std::string Trainer::checkpoint_bytes(const std::string &config_hash) const {
  std::ostringstream out(std::ios::binary);
  io::write_magic(out, "DCKP");
  io::write_u16(out, kCheckpointVersion);
  write_str(out, config_hash);
  write_str(out, serialize_params(state_.params));
  io::write_u32(out, static_cast<std::uint32_t>(state_.momentum.size()));
  for (const auto &[name, v] : state_.momentum) {
    write_str(out, name);
    write_tensor(out, Tensor({v.size()}, v));
  }
  std::ostringstream rng;
  rng << state_.rng;
  write_str(out, rng.str());

  json losses = json::array();
  for (const auto &r : state_.loss_history)
    losses.push_back({{"phase", to_string(r.phase)},
                      {"iteration", r.iteration},
                      {"epoch", r.epoch},
                      {"step", r.step},
                      {"mean", breakdown_json(r.mean)}});
  json metrics = json::array();
  for (const auto &m : state_.metrics)
    metrics.push_back(json::parse(m.to_json()));
  json progress{
      {"phase", to_string(state_.phase)},
      {"iteration", state_.iteration},
      {"epoch", state_.epoch},
      {"step_in_epoch", state_.step_in_epoch},
      {"global_step", state_.global_step},
      {"labels_ready", state_.labels_ready},
      {"clusters", state_.clusters.labels.empty()
                       ? json()
                       : json::parse(cluster_model_to_json(state_.clusters))},
      {"loss_history", losses},
      {"metrics", metrics},
      {"epoch_sum", breakdown_json(state_.epoch_sum)},
      {"epoch_batches", state_.epoch_batches}};
  write_str(out, progress.dump());
  return out.str();
}

void Trainer::save_checkpoint(const std::filesystem::path &path,
                              const std::string &config_hash) const {
  const auto bytes = checkpoint_bytes(config_hash);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out)
      throw std::runtime_error("cannot write checkpoint " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out)
      throw std::runtime_error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Trainer Trainer::resume_bytes(const std::string &bytes,
                              const GeneratedData &data, TrainConfig config,
                              const std::string &config_hash,
                              const BackboneConfig &backbone) {
  std::istringstream in(bytes, std::ios::binary);
  io::expect_magic(in, "DCKP", "checkpoint");
  const auto version = io::read_u16(in);
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint version " + std::to_string(version) +
                      " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  const auto stored_hash = read_str(in, "config hash");
  if (stored_hash != config_hash)
    throw ConfigError("checkpoint was written under config " + stored_hash +
                      " but the current config hashes to " + config_hash +
                      "; refusing to resume");
  Trainer t(data, std::move(config), backbone);
  deserialize_params(read_str(in, "parameters"), t.state_.params);
  const auto n = io::read_u32(in);
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto name = read_str(in, "momentum name");
    const auto v = read_tensor(in);
    t.state_.momentum[name].assign(v.data().begin(), v.data().end());
  }
  std::istringstream rng(read_str(in, "rng state"));
  rng >> t.state_.rng;
  if (!rng)
    throw FormatError("checkpoint rng state is malformed");
  try {
    const auto j = json::parse(read_str(in, "progress"));
    auto &s = t.state_;
    s.phase = phase_from_string(j.at("phase").get<std::string>());
    s.iteration = j.at("iteration").get<std::size_t>();
    s.epoch = j.at("epoch").get<std::size_t>();
    s.step_in_epoch = j.at("step_in_epoch").get<std::size_t>();
    s.global_step = j.at("global_step").get<std::size_t>();
    s.labels_ready = j.at("labels_ready").get<bool>();
    if (!j.at("clusters").is_null())
      s.clusters = cluster_model_from_json(j.at("clusters").dump());
    for (const auto &r : j.at("loss_history"))
      s.loss_history.push_back({phase_from_string(r.at("phase").get<std::string>()),
                                r.at("iteration").get<std::size_t>(),
                                r.at("epoch").get<std::size_t>(),
                                r.at("step").get<std::size_t>(),
                                breakdown_from(r.at("mean"))});
    for (const auto &m : j.at("metrics"))
      s.metrics.push_back(MetricsReport::from_json(m.dump()));
    s.epoch_sum = breakdown_from(j.at("epoch_sum"));
    s.epoch_batches = j.at("epoch_batches").get<std::size_t>();
  } catch (const json::exception &e) {
    throw FormatError(std::string("checkpoint progress: ") + e.what());
  }
  return t;
}

Trainer Trainer::resume(const std::filesystem::path &path,
                        const GeneratedData &data, TrainConfig config,
                        const std::string &config_hash,
                        const BackboneConfig &backbone) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw std::runtime_error("cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return resume_bytes(buf.str(), data, std::move(config), config_hash,
                      backbone);
}

double source_train_accuracy(const Dataset &source, DaamParams &params,
                             bool attention) {
  NoGradScope no_grad;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < source.size(); start += 64) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(source.size(), start + 64); ++i)
      idx.push_back(i);
    const auto fa = forward(stack_images(source, idx), params,
                            {Mode::eval, attention, false});
    const std::size_t k = fa.heads.p_src_id.dim(1);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const auto row = fa.heads.p_src_id.data().subspan(r * k, k);
      const auto arg = static_cast<std::size_t>(
          std::max_element(row.begin(), row.end()) - row.begin());
      correct += arg == source.samples[idx[r]].identity_id;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(source.size());
}

std::string train_log_csv(const std::vector<LossRecord> &history) {
  std::string out = "phase," + loss_csv_header() + "\n";
  for (const auto &r : history)
    out += to_string(r.phase) + "," +
           loss_csv_row(r.iteration, r.epoch, r.step, r.mean) + "\n";
  return out;
}

std::string metrics_csv(const std::vector<MetricsReport> &reports) {
  std::string out = metrics_csv_header() + "\n";
  for (const auto &r : reports)
    out += metrics_csv_row(r) + "\n";
  return out;
}

} // namespace daam
