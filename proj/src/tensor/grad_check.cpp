// SPDX-License-Identifier: Apache-2.0
#include "daam/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace daam {

double relative_error(double analytic, double numeric, double abs_floor) {
  const double denom =
      std::max({std::abs(analytic), std::abs(numeric), abs_floor});
  return std::abs(analytic - numeric) / denom;
}

const GradCheckEntry *GradCheckReport::worst() const {
  if (entries.empty())
    return nullptr;
  return &*std::max_element(entries.begin(), entries.end(),
                            [](const auto &a, const auto &b) {
                              return a.rel_error < b.rel_error;
                            });
}

std::vector<GradCheckEntry> GradCheckReport::failures() const {
  std::vector<GradCheckEntry> out;
  for (const auto &e : entries)
    if (!(e.rel_error < tol))
      out.push_back(e);
  return out;
}

GradCheckReport grad_check(const std::function<Tensor()> &f,
                           const std::vector<NamedTensor> &inputs,
                           const GradCheckOptions &options) {
  std::vector<Tensor> leaves;
  std::vector<bool> was_tracked;
  for (const auto &in : inputs) {
    Tensor t = in.tensor;
    was_tracked.push_back(t.requires_grad());
    t.set_requires_grad(true);
    leaves.push_back(t);
  }

  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = f();
    tape.backward(loss);
  }

  GradCheckReport report;
  report.tol = options.tol;
  std::mt19937_64 rng(options.seed);
  NoGradScope no_grad;

  auto eval = [&] { return f().item(); };

  for (std::size_t t = 0; t < leaves.size(); ++t) {
    Tensor &leaf = leaves[t];
    std::vector<std::size_t> order(leaf.numel());
    std::iota(order.begin(), order.end(), 0);
    if (options.max_entries_per_tensor > 0 &&
        order.size() > options.max_entries_per_tensor) {
      std::shuffle(order.begin(), order.end(), rng);
      order.resize(options.max_entries_per_tensor);
      std::sort(order.begin(), order.end());
    }
    std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
    auto values = leaf.data();
    for (std::size_t i : order) {
      const double original = values[i];
      values[i] = original + options.eps;
      const double up = eval();
      values[i] = original - options.eps;
      const double down = eval();
      values[i] = original;
      const double numeric = (up - down) / (2.0 * options.eps);
      GradCheckEntry entry{inputs[t].name, i, analytic[i], numeric,
                           relative_error(analytic[i], numeric,
                                          options.abs_floor)};
      report.max_rel_error = std::max(report.max_rel_error, entry.rel_error);
      report.entries.push_back(std::move(entry));
    }
  }

  for (std::size_t t = 0; t < leaves.size(); ++t)
    if (!was_tracked[t])
      leaves[t].set_requires_grad(false);
  return report;
}

} // namespace daam
