// SPDX-License-Identifier: Apache-2.0
#include "daam/audit.hpp"

#include <algorithm>
#include <chrono>
#include <functional>
#include <random>

#include "daam/losses.hpp"
#include "daam/net.hpp"
#include "daam/ops.hpp"

namespace daam {

bool AuditReport::passed() const {
  return !cases.empty() &&
         std::all_of(cases.begin(), cases.end(),
                     [](const AuditCase &c) { return c.report.passed(); });
}

double AuditReport::max_rel_error() const {
  double m = 0.0;
  for (const auto &c : cases)
    m = std::max(m, c.report.max_rel_error);
  return m;
}

const AuditCase *AuditReport::worst() const {
  if (cases.empty())
    return nullptr;
  return &*std::max_element(cases.begin(), cases.end(),
                            [](const AuditCase &a, const AuditCase &b) {
                              return a.report.max_rel_error <
                                     b.report.max_rel_error;
                            });
}

namespace {

class Auditor {
public:
  explicit Auditor(const AuditOptions &o) : opts_(o), rng_(o.seed) {}

  Tensor uniform(Shape shape, double lo, double hi) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t(std::move(shape));
    for (auto &v : t.data())
      v = u(rng_);
    return t;
  }

  /// Entries with magnitude in [0.1, 1] and random sign, keeping finite
  /// differences away from the kinks of relu and clamp.
  Tensor away_from_zero(Shape shape) {
    Tensor t = uniform(std::move(shape), 0.1, 1.0);
    std::bernoulli_distribution flip(0.5);
    for (auto &v : t.data())
      if (flip(rng_))
        v = -v;
    return t;
  }

  /// Scalar objective: the output projected onto fixed random weights.
  std::function<Tensor()> projected(std::function<Tensor()> op) {
    Tensor probe = op();
    Tensor w = uniform(probe.shape(), -1.0, 1.0);
    return [op = std::move(op), w] { return sum(mul(op(), w)); };
  }

  void check(const std::string &name, const std::function<Tensor()> &f,
             const std::vector<NamedTensor> &inputs, bool network = false,
             std::size_t entries = 0) {
    GradCheckOptions g;
    g.eps = opts_.eps;
    g.tol = opts_.tol;
    g.abs_floor = network ? opts_.network_abs_floor : opts_.abs_floor;
    g.max_entries_per_tensor = entries;
    g.seed = opts_.seed;
    const auto t0 = std::chrono::steady_clock::now();
    AuditCase c{name, grad_check(f, inputs, g), 0.0};
    c.seconds = std::chrono::duration<double>(
                    std::chrono::steady_clock::now() - t0)
                    .count();
    report_.cases.push_back(std::move(c));
  }

  void op(const std::string &name, const std::function<Tensor()> &f,
          const std::vector<NamedTensor> &inputs) {
    check("op/" + name, projected(f), inputs);
  }

  AuditReport run();

private:
  void ops();
  void losses();
  void network();

  AuditOptions opts_;
  std::mt19937_64 rng_;
  AuditReport report_;
};

void Auditor::ops() {
  Tensor a = uniform({3, 4}, -1, 1), b = uniform({4, 2}, -1, 1);
  op("matmul", [=] { return matmul(a, b); }, {{"a", a}, {"b", b}});
  op("transpose", [=] { return transpose(a); }, {{"a", a}});

  Tensor x = uniform({2, 3, 4}, -1, 1), row = uniform({4}, -1, 1);
  Tensor pos = uniform({2, 3, 4}, 0.5, 2.0), pos_row = uniform({4}, 0.5, 2.0);
  op("add", [=] { return add(x, row); }, {{"x", x}, {"row", row}});
  op("sub", [=] { return sub(x, row); }, {{"x", x}, {"row", row}});
  op("mul", [=] { return mul(x, row); }, {{"x", x}, {"row", row}});
  op("div", [=] { return div(x, pos_row); }, {{"x", x}, {"row", pos_row}});
  op("scale", [=] { return scale(x, -1.7); }, {{"x", x}});

  Tensor k = away_from_zero({3, 5});
  op("relu", [=] { return relu(k); }, {{"x", k}});
  op("sigmoid", [=] { return sigmoid(x); }, {{"x", x}});
  op("exp", [=] { return exp(x); }, {{"x", x}});
  op("log", [=] { return log(pos); }, {{"x", pos}});
  op("sqrt", [=] { return sqrt(pos); }, {{"x", pos}});
  Tensor c = uniform({4, 4}, -1, 1);
  for (auto &v : c.data())
    if (std::abs(std::abs(v) - 0.5) < 0.05)
      v *= 0.8;
  op("clamp", [=] { return clamp(c, -0.5, 0.5); }, {{"x", c}});
  op("reshape", [=] { return reshape(x, {6, 4}); }, {{"x", x}});

  op("sum", [=] { return sum(x); }, {{"x", x}});
  op("mean", [=] { return mean(x); }, {{"x", x}});
  op("sum_last", [=] { return sum_last(x); }, {{"x", x}});
  Tensor u = uniform({5, 3}, -1, 1), v = uniform({5, 3}, -1, 1);
  op("dot", [=] { return dot(u, v); }, {{"u", u}, {"v", v}});
  op("l2_norm_sq", [=] { return l2_norm_sq(u); }, {{"u", u}});
  op("softmax", [=] { return softmax(u); }, {{"x", u}});
  const std::vector<std::size_t> idx{2, 0, 1, 1, 2};
  op("pick", [=] { return pick(u, idx); }, {{"x", u}});

  Tensor img = uniform({2, 6, 5, 3}, -1, 1), ker = uniform({3, 3, 3, 4}, -1, 1);
  op("conv2d/stride1", [=] { return conv2d(img, ker, 1, 1); },
     {{"input", img}, {"kernel", ker}});
  op("conv2d/stride2", [=] { return conv2d(img, ker, 2, 1); },
     {{"input", img}, {"kernel", ker}});
  Tensor pointwise = uniform({1, 1, 3, 2}, -1, 1);
  op("conv2d/1x1", [=] { return conv2d(img, pointwise, 1, 0); },
     {{"input", img}, {"kernel", pointwise}});
  op("global_avg_pool_spatial", [=] { return global_avg_pool_spatial(img); },
     {{"x", img}});
  op("avg_pool_channels", [=] { return avg_pool_channels(img); },
     {{"x", img}});
  Tensor small = uniform({2, 3, 2, 2}, -1, 1);
  op("upsample_nearest", [=] { return upsample_nearest(small, 6, 5); },
     {{"x", small}});

  auto bn = std::make_shared<BatchNorm>(3);
  bn->gamma = uniform({3}, 0.5, 1.5);
  bn->beta = uniform({3}, -0.5, 0.5);
  Tensor feats = uniform({4, 2, 2, 3}, -1, 1);
  op("batchnorm/train", [=] { return batchnorm(feats, *bn, true); },
     {{"x", feats}, {"gamma", bn->gamma}, {"beta", bn->beta}});
  auto bn_eval = std::make_shared<BatchNorm>(*bn);
  for (std::size_t i = 0; i < 3; ++i) {
    bn_eval->running_mean[i] = 0.1 * static_cast<double>(i);
    bn_eval->running_var[i] = 0.5 + 0.25 * static_cast<double>(i);
  }
  op("batchnorm/eval", [=] { return batchnorm(feats, *bn_eval, false); },
     {{"x", feats}, {"gamma", bn_eval->gamma}, {"beta", bn_eval->beta}});
}

void Auditor::losses() {
  Tensor logits_occ = uniform({6, 1}, -2, 2);
  check("loss/domain_similarity",
        [=] { return domain_similarity_loss(sigmoid(logits_occ)); },
        {{"logits", logits_occ}});

  Tensor logits = uniform({4, 5}, -2, 2);
  const std::vector<std::size_t> labels{4, 0, 2, 2};
  check("loss/reid_source",
        [=] { return reid_source_loss(softmax(logits), labels); },
        {{"logits", logits}});
  const std::vector<double> weights{0.5, 0.1, 0.35, 0.2};
  check("loss/reid_target",
        [=] { return reid_target_loss(softmax(logits), labels, weights); },
        {{"logits", logits}});

  Tensor dom_logits = uniform({4, 2}, -2, 2);
  const std::vector<Domain> domains{Domain::source, Domain::target,
                                    Domain::target, Domain::source};
  check("loss/domain_specific",
        [=] { return domain_specific_loss(softmax(dom_logits), domains); },
        {{"logits", dom_logits}});

  Tensor sh = uniform({4, 6}, -1, 1), sp = uniform({4, 6}, -1, 1);
  check("loss/orthogonality", [=] { return orthogonality_loss(sh, sp); },
        {{"f_sh", sh}, {"f_sp", sp}});
  check("loss/orthogonality_cosine",
        [=] { return orthogonality_loss(sh, sp, true); },
        {{"f_sh", sh}, {"f_sp", sp}});
}

void Auditor::network() {
  auto params = std::make_shared<DaamParams>(
      init_params(BackboneConfig{}, HeadSizes{3, 2}, opts_.seed));
  const BackboneConfig &cfg = params->config;
  Tensor x = uniform({4, cfg.image_height, cfg.image_width, 3}, 0.0, 1.0);
  const BatchLossInputs in{
      {Domain::source, Domain::target, Domain::source, Domain::target},
      {2, 1, 0, 0},
      {0.4, 0.3, 0.2, 0.45}};
  auto objective = [=](LossOptions lo, bool domain_specific) {
    return [=] {
      auto fa = forward(x, *params, {Mode::train, true, domain_specific});
      return total_loss(fa, in, lo).total;
    };
  };
  check("network/total", objective({}, true), params->learnable(), true,
        opts_.network_entries_per_tensor);
  LossOptions cosine;
  cosine.orth_cosine = true;
  check("network/total_cosine_orth", objective(cosine, true),
        params->learnable(), true, opts_.variant_entries_per_tensor);
  LossOptions pre;
  pre.pretrain = true;
  check("network/pretrain", objective(pre, false), params->learnable(), true,
        opts_.variant_entries_per_tensor);
}

AuditReport Auditor::run() {
  const auto t0 = std::chrono::steady_clock::now();
  ops();
  losses();
  network();
  report_.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return report_;
}

} // namespace

AuditReport gradient_audit(const AuditOptions &options) {
  return Auditor(options).run();
}

} // namespace daam
