// SPDX-License-Identifier: Apache-2.0
#include "daam/weak_labels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>

#include "json.hpp"

namespace daam {

namespace {

struct Run {
  Points centers;
  std::vector<std::size_t> labels;
  std::vector<double> dist;
  double inertia = 0.0;
  std::vector<double> history;
  std::size_t iterations = 0;
  bool converged = false;
};

Points seed_centers(const Points &pts, std::size_t k, std::mt19937_64 &rng) {
  const std::size_t n = pts.size();
  Points centers;
  std::vector<bool> chosen(n, false);
  std::uniform_int_distribution<std::size_t> first(0, n - 1);
  std::size_t idx = first(rng);
  centers.push_back(pts[idx]);
  chosen[idx] = true;

  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i)
    d2[i] = squared_distance(pts[i], centers[0]);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  while (centers.size() < k) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    if (total > 0.0) {
      const double r = u(rng) * total;
      double acc = 0.0;
      idx = n;
      for (std::size_t i = 0; i < n; ++i) {
        if (d2[i] <= 0.0)
          continue;
        acc += d2[i];
        idx = i;
        if (acc > r)
          break;
      }
    } else {
      std::vector<std::size_t> rest;
      for (std::size_t i = 0; i < n; ++i)
        if (!chosen[i])
          rest.push_back(i);
      std::uniform_int_distribution<std::size_t> pick(0, rest.size() - 1);
      idx = rest[pick(rng)];
    }
    centers.push_back(pts[idx]);
    chosen[idx] = true;
    for (std::size_t i = 0; i < n; ++i)
      d2[i] = std::min(d2[i], squared_distance(pts[i], centers.back()));
  }
  return centers;
}

double assign_all(const Points &pts, const Points &centers,
                  std::vector<std::size_t> &labels, std::vector<double> &dist) {
  double inertia = 0.0;
  labels.resize(pts.size());
  dist.resize(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    labels[i] = assign_weak_label(pts[i], centers);
    dist[i] = squared_distance(pts[i], centers[labels[i]]);
    inertia += dist[i];
  }
  return inertia;
}

Run lloyd(const Points &pts, Points centers, const KMeansOptions &opt) {
  const std::size_t n = pts.size(), k = centers.size(), d = pts[0].size();
  Run run;
  std::vector<std::size_t> prev;
  for (std::size_t it = 0; it < opt.max_iter; ++it) {
    run.inertia = assign_all(pts, centers, run.labels, run.dist);
    run.history.push_back(run.inertia);
    run.iterations = it + 1;
    if (it > 0 && run.labels == prev) {
      run.converged = true;
      break;
    }

    Points next(k, std::vector<double>(d, 0.0));
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++count[run.labels[i]];
      for (std::size_t j = 0; j < d; ++j)
        next[run.labels[i]][j] += pts[i][j];
    }
    std::vector<bool> taken(n, false);
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] > 0) {
        for (auto &v : next[c])
          v /= static_cast<double>(count[c]);
        continue;
      }
      std::size_t far = n;
      for (std::size_t i = 0; i < n; ++i)
        if (!taken[i] && (far == n || run.dist[i] > run.dist[far]))
          far = i;
      taken[far] = true;
      next[c] = pts[far];
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c)
      shift = std::max(shift, std::sqrt(squared_distance(next[c], centers[c])));
    centers = std::move(next);
    prev = run.labels;
    if (shift < opt.tol) {
      run.inertia = assign_all(pts, centers, run.labels, run.dist);
      run.history.push_back(run.inertia);
      run.converged = true;
      break;
    }
  }
  run.centers = std::move(centers);
  return run;
}

// Single-point transfers: move a point to another cluster whenever that
// lowers the total within-cluster sum of squares, accounting for both means
// moving. Stable states are also Lloyd fixed points.
void refine_transfers(const Points &pts, Run &run, std::size_t max_passes) {
  const std::size_t n = pts.size(), k = run.centers.size(), d = pts[0].size();
  std::vector<double> count(k, 0.0);
  for (auto l : run.labels)
    count[l] += 1.0;
  bool moved = true;
  for (std::size_t pass = 0; pass < max_passes && moved; ++pass) {
    moved = false;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t a = run.labels[i];
      if (count[a] <= 1.0)
        continue;
      const double cost_out = count[a] / (count[a] - 1.0) *
                              squared_distance(pts[i], run.centers[a]);
      std::size_t best = a;
      double best_in = cost_out;
      for (std::size_t b = 0; b < k; ++b) {
        if (b == a)
          continue;
        const double cost_in = count[b] / (count[b] + 1.0) *
                               squared_distance(pts[i], run.centers[b]);
        if (cost_in < best_in) {
          best_in = cost_in;
          best = b;
        }
      }
      if (best == a || cost_out - best_in <= 1e-12 * cost_out)
        continue;
      for (std::size_t j = 0; j < d; ++j) {
        run.centers[a][j] =
            (run.centers[a][j] * count[a] - pts[i][j]) / (count[a] - 1.0);
        run.centers[best][j] =
            (run.centers[best][j] * count[best] + pts[i][j]) /
            (count[best] + 1.0);
      }
      count[a] -= 1.0;
      count[best] += 1.0;
      run.labels[i] = best;
      moved = true;
    }
    if (!moved)
      break;
    // Recompute means exactly so incremental updates do not drift.
    for (auto &c : run.centers)
      std::fill(c.begin(), c.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j)
        run.centers[run.labels[i]][j] += pts[i][j];
    for (std::size_t c = 0; c < k; ++c)
      for (auto &v : run.centers[c])
        v /= count[c];
    run.inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      run.dist[i] = squared_distance(pts[i], run.centers[run.labels[i]]);
      run.inertia += run.dist[i];
    }
    run.history.push_back(run.inertia);
  }
}

} // namespace

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double t = a[i] - b[i];
    s += t * t;
  }
  return s;
}

std::size_t assign_weak_label(std::span<const double> f, const Points &centers) {
  if (centers.empty())
    throw std::invalid_argument("assign_weak_label: no centers");
  std::size_t best = 0;
  double best_d = squared_distance(f, centers[0]);
  for (std::size_t c = 1; c < centers.size(); ++c) {
    const double dist = squared_distance(f, centers[c]);
    if (dist < best_d) {
      best_d = dist;
      best = c;
    }
  }
  return best;
}

double confidence_weight_from_sq(double squared_distance) {
  const double w = 1.0 / (1.0 + std::exp(std::min(squared_distance, 700.0)));
  return std::max(w, 1e-30);
}

double confidence_weight(std::span<const double> f,
                         std::span<const double> center) {
  return confidence_weight_from_sq(squared_distance(f, center));
}

ClusterModel kmeans_pp(const Points &points, std::size_t k, std::uint64_t seed,
                       const KMeansOptions &options) {
  if (k < 1)
    throw std::invalid_argument("kmeans_pp: K must be at least 1");
  if (points.size() < k)
    throw std::invalid_argument("kmeans_pp: " + std::to_string(points.size()) +
                                " points cannot form " + std::to_string(k) +
                                " clusters");
  const std::size_t d = points[0].size();
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (points[i].size() != d)
      throw DimensionError("kmeans_pp: point " + std::to_string(i) +
                           " has a different dimension");
    for (double v : points[i])
      if (!std::isfinite(v))
        throw NumericError("kmeans_pp: non-finite coordinate in point " +
                           std::to_string(i));
  }

  std::mt19937_64 rng(seed);
  Run best;
  bool have = false;
  for (std::size_t r = 0; r < std::max<std::size_t>(options.n_init, 1); ++r) {
    Run run = lloyd(points, seed_centers(points, k, rng), options);
    if (options.refine)
      refine_transfers(points, run, options.max_iter);
    if (!have || run.inertia < best.inertia) {
      best = std::move(run);
      have = true;
    }
  }

  ClusterModel m;
  m.k = k;
  m.seed = seed;
  m.centers = std::move(best.centers);
  m.labels = std::move(best.labels);
  m.inertia = best.inertia;
  m.inertia_history = std::move(best.history);
  m.iterations = best.iterations;
  m.converged = best.converged;
  m.weights.reserve(points.size());
  for (double dist : best.dist)
    m.weights.push_back(confidence_weight_from_sq(dist));
  return m;
}

Points tensor_rows(const Tensor &t) {
  if (t.rank() != 2)
    throw DimensionError("tensor_rows: expected [n, d], got " +
                         shape_str(t.shape()));
  Points out(t.dim(0));
  const auto data = t.data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i].assign(data.begin() + i * t.dim(1), data.begin() + (i + 1) * t.dim(1));
  return out;
}

ClusterModel relabel_dataset(const Tensor &features, std::size_t k,
                             std::uint64_t seed, const KMeansOptions &options) {
  return kmeans_pp(tensor_rows(features), k, seed, options);
}

std::size_t default_cluster_count(std::size_t n_target_identities) {
  const auto k = static_cast<std::size_t>(
      std::lround(650.0 / 751.0 * static_cast<double>(n_target_identities)));
  return std::max<std::size_t>(k, 1);
}

double adjusted_rand_index(std::span<const std::size_t> a,
                           std::span<const std::size_t> b) {
  if (a.size() != b.size())
    throw DimensionError("adjusted_rand_index: labelings differ in length");
  const double n = static_cast<double>(a.size());
  std::map<std::pair<std::size_t, std::size_t>, double> joint;
  std::map<std::size_t, double> ca, cb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[{a[i], b[i]}] += 1.0;
    ca[a[i]] += 1.0;
    cb[b[i]] += 1.0;
  }
  auto pairs = [](double x) { return x * (x - 1.0) / 2.0; };
  double sum_joint = 0.0, sum_a = 0.0, sum_b = 0.0;
  for (const auto &[key, c] : joint)
    sum_joint += pairs(c);
  for (const auto &[key, c] : ca)
    sum_a += pairs(c);
  for (const auto &[key, c] : cb)
    sum_b += pairs(c);
  const double expected = sum_a * sum_b / pairs(n);
  const double max_index = 0.5 * (sum_a + sum_b);
  if (max_index == expected)
    return 1.0; // both labelings trivial (all one cluster or all singletons)
  return (sum_joint - expected) / (max_index - expected);
}

std::string cluster_model_to_json(const ClusterModel &m) {
  nlohmann::json j{{"k", m.k},
                   {"seed", m.seed},
                   {"inertia", m.inertia},
                   {"iterations", m.iterations},
                   {"converged", m.converged},
                   {"inertia_history", m.inertia_history},
                   {"centers", m.centers},
                   {"labels", m.labels},
                   {"weights", m.weights}};
  return j.dump();
}

ClusterModel cluster_model_from_json(const std::string &text) {
  try {
    const auto j = nlohmann::json::parse(text);
    ClusterModel m;
    m.k = j.at("k").get<std::size_t>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.inertia = j.at("inertia").get<double>();
    m.iterations = j.at("iterations").get<std::size_t>();
    m.converged = j.at("converged").get<bool>();
    m.inertia_history = j.at("inertia_history").get<std::vector<double>>();
    m.centers = j.at("centers").get<Points>();
    m.labels = j.at("labels").get<std::vector<std::size_t>>();
    m.weights = j.at("weights").get<std::vector<double>>();
    return m;
  } catch (const nlohmann::json::exception &e) {
    throw FormatError(std::string("cluster model: ") + e.what());
  }
}

} // namespace daam
