// SPDX-License-Identifier: Apache-2.0
#include "daam/losses.hpp"

#include <cstdio>
#include <limits>
#include <sstream>

namespace daam {

namespace {

constexpr double kNormFloorSq = 1e-24; // |v| >= 1e-12

Tensor nll(const Tensor &probs) {
  return scale(log(clamp(probs, kProbEps, 1.0 - kProbEps)), -1.0);
}

Tensor as_rows(const Tensor &p) {
  if (p.rank() == 1)
    return reshape(p, {1, p.dim(0)});
  return p;
}

// sum_i coeff_i * -log p[i, label_i]
Tensor weighted_nll(const Tensor &probs, std::span<const std::size_t> labels,
                    std::vector<double> coeff) {
  Tensor rows = as_rows(probs);
  Tensor picked = pick(rows, labels);
  const std::size_t n = coeff.size();
  return sum(mul(nll(picked), Tensor({n}, std::move(coeff))));
}

void check_labels(std::span<const std::size_t> labels, std::size_t classes,
                  const char *what) {
  for (auto y : labels)
    if (y >= classes)
      throw DimensionError(std::string(what) + ": label " + std::to_string(y) +
                           " out of range for " + std::to_string(classes) +
                           " classes");
}

} // namespace

Tensor domain_similarity_loss(const Tensor &p_occ) {
  if (p_occ.numel() == 0 || p_occ.rank() == 0)
    throw DimensionError("domain_similarity_loss: empty batch");
  return mean(nll(p_occ));
}

Tensor reid_source_loss(const Tensor &p_src_id,
                        std::span<const std::size_t> labels) {
  Tensor rows = as_rows(p_src_id);
  if (labels.size() != rows.dim(0))
    throw DimensionError("reid_source_loss: label count mismatch");
  check_labels(labels, rows.dim(1), "reid_source_loss");
  return weighted_nll(rows, labels,
                      std::vector<double>(labels.size(),
                                          1.0 / static_cast<double>(labels.size())));
}

Tensor reid_target_loss(const Tensor &p_tgt_id,
                        std::span<const std::size_t> weak_labels,
                        std::span<const double> weights) {
  Tensor rows = as_rows(p_tgt_id);
  if (weak_labels.size() != rows.dim(0) || weights.size() != rows.dim(0))
    throw DimensionError("reid_target_loss: label/weight count mismatch");
  check_labels(weak_labels, rows.dim(1), "reid_target_loss");
  std::vector<double> coeff(weights.begin(), weights.end());
  for (auto &c : coeff)
    c /= static_cast<double>(weights.size());
  return weighted_nll(rows, weak_labels, std::move(coeff));
}

Tensor domain_specific_loss(const Tensor &p_domain,
                            std::span<const Domain> domains) {
  Tensor rows = as_rows(p_domain);
  if (domains.size() != rows.dim(0) || rows.dim(1) != 2)
    throw DimensionError("domain_specific_loss: expected [n,2] with n tags");
  std::vector<std::size_t> idx;
  for (auto d : domains)
    idx.push_back(static_cast<std::size_t>(d));
  return weighted_nll(rows, idx,
                      std::vector<double>(idx.size(),
                                          1.0 / static_cast<double>(idx.size())));
}

Tensor orthogonality_loss(const Tensor &f_sh, const Tensor &f_sp, bool cosine) {
  Tensor a = as_rows(f_sh), b = as_rows(f_sp);
  const double inf = std::numeric_limits<double>::max();
  Tensor na = clamp(l2_norm_sq(a), kNormFloorSq, inf);
  Tensor nb = clamp(l2_norm_sq(b), kNormFloorSq, inf);
  Tensor denom = cosine ? sqrt(mul(na, nb)) : mul(na, nb);
  return mean(div(dot(a, b), denom));
}

TotalLoss total_loss(const ForwardArtifacts &fa, const BatchLossInputs &batch,
                     const LossOptions &options) {
  const std::size_t n = batch.domains.size();
  if (n == 0)
    throw DimensionError("total_loss: empty batch");
  if (batch.labels.size() != n || fa.f_sh.dim(0) != n)
    throw DimensionError("total_loss: batch metadata does not match outputs");

  TotalLoss out;
  auto &b = out.breakdown;
  for (auto d : batch.domains)
    (d == Domain::source ? b.n_source : b.n_target)++;
  b.no_source = b.n_source == 0;
  b.single_domain = b.n_source == 0 || b.n_target == 0;

  std::vector<Tensor> terms;

  if (b.n_source > 0) {
    const std::size_t classes = fa.heads.p_src_id.dim(1);
    std::vector<std::size_t> labels(n, 0);
    std::vector<double> coeff(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      if (batch.domains[i] == Domain::source) {
        if (batch.labels[i] >= classes)
          throw DimensionError("total_loss: source label " +
                               std::to_string(batch.labels[i]) +
                               " out of range for " + std::to_string(classes) +
                               " identities");
        labels[i] = batch.labels[i];
        coeff[i] = 1.0 / static_cast<double>(b.n_source);
      }
    Tensor t = weighted_nll(fa.heads.p_src_id, labels, std::move(coeff));
    b.reid_s = t.item();
    terms.push_back(t);
  }

  if (!options.pretrain) {
    if (options.domain_similarity) {
      Tensor t = domain_similarity_loss(fa.heads.p_occ);
      b.ds = t.item();
      terms.push_back(t);
    }
    if (b.n_target > 0) {
      const std::size_t classes = fa.heads.p_tgt_id.dim(1);
      if (batch.weights.size() != n)
        throw DimensionError("total_loss: weight count mismatch");
      std::vector<std::size_t> labels(n, 0);
      std::vector<double> coeff(n, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        if (batch.domains[i] == Domain::target) {
          if (batch.labels[i] >= classes)
            throw DimensionError("total_loss: weak label " +
                                 std::to_string(batch.labels[i]) +
                                 " out of range for K=" +
                                 std::to_string(classes));
          labels[i] = batch.labels[i];
          const double w = options.target_weights ? batch.weights[i] : 1.0;
          coeff[i] = w / static_cast<double>(b.n_target);
        }
      Tensor t = weighted_nll(fa.heads.p_tgt_id, labels, std::move(coeff));
      b.reid_t = t.item();
      terms.push_back(t);
    }
    if (fa.has_domain_specific && options.domain_specific) {
      Tensor t = domain_specific_loss(fa.heads.p_domain, batch.domains);
      b.dsp = t.item();
      terms.push_back(t);
    }
    if (fa.has_domain_specific && options.orthogonality) {
      Tensor t = orthogonality_loss(fa.f_sh, fa.f_sp, options.orth_cosine);
      b.orth = t.item();
      terms.push_back(t);
    }
  }

  if (terms.empty()) {
    out.total = Tensor::scalar(0.0);
  } else {
    out.total = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i)
      out.total = add(out.total, terms[i]);
  }
  b.total = out.total.item();
  return out;
}

std::string loss_csv_header() {
  return "iteration,epoch,step,l_ds,l_reid_s,l_reid_t,l_dsp,l_orth,l_total";
}

std::string loss_csv_row(std::size_t iteration, std::size_t epoch,
                         std::size_t step, const LossBreakdown &b) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%zu,%zu,%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g",
                iteration, epoch, step, b.ds, b.reid_s, b.reid_t, b.dsp, b.orth,
                b.total);
  return buf;
}

} // namespace daam
