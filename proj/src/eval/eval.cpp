// SPDX-License-Identifier: Apache-2.0
#include "daam/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include "json.hpp"

namespace daam {

FeatureSet extract_features(const Dataset &dataset, DaamParams &params,
                            const ExtractOptions &options) {
  const std::size_t n = dataset.size(), d = params.config.embed_dim;
  if (n == 0)
    throw std::invalid_argument("extract_features: empty dataset");
  FeatureSet out{Tensor({n, d}), Tensor({n, d})};
  NoGradScope no_grad;
  const std::size_t bs = std::max<std::size_t>(options.batch_size, 1);
  for (std::size_t start = 0; start < n; start += bs) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(n, start + bs); ++i)
      idx.push_back(i);
    const auto fa = forward(stack_images(dataset, idx), params,
                            {Mode::eval, options.attention, true});
    std::copy(fa.f_sh.data().begin(), fa.f_sh.data().end(),
              out.f_sh.data().begin() + start * d);
    std::copy(fa.f_sp.data().begin(), fa.f_sp.data().end(),
              out.f_sp.data().begin() + start * d);
  }
  return out;
}

RetrievalMeta retrieval_meta(const Dataset &dataset) {
  RetrievalMeta m;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    m.identities.push_back(dataset.global_identity(i));
    m.cameras.push_back(dataset.samples[i].camera_id);
  }
  return m;
}

double average_precision(const std::vector<bool> &relevant) {
  double hits = 0.0, sum = 0.0;
  for (std::size_t r = 0; r < relevant.size(); ++r)
    if (relevant[r]) {
      hits += 1.0;
      sum += hits / static_cast<double>(r + 1);
    }
  return hits > 0.0 ? sum / hits : 0.0;
}

RankingResult rank_and_score(const Tensor &query, const RetrievalMeta &qmeta,
                             const Tensor &gallery, const RetrievalMeta &gmeta,
                             MetricsReport &report, const RankOptions &options) {
  if (query.rank() != 2 || gallery.rank() != 2 ||
      query.dim(1) != gallery.dim(1))
    throw DimensionError("rank_and_score: feature shapes " +
                         shape_str(query.shape()) + " and " +
                         shape_str(gallery.shape()) + " are incompatible");
  const std::size_t nq = query.dim(0), ng = gallery.dim(0), d = query.dim(1);
  if (qmeta.identities.size() != nq || qmeta.cameras.size() != nq ||
      gmeta.identities.size() != ng || gmeta.cameras.size() != ng)
    throw DimensionError("rank_and_score: metadata count mismatch");

  auto row = [d](const Tensor &t, std::size_t i) {
    return std::span<const double>(t.data().data() + i * d, d);
  };
  auto distance = [&](std::size_t q, std::size_t g) {
    const auto a = row(query, q), b = row(gallery, g);
    if (options.cosine) {
      double dot = 0, na = 0, nb = 0;
      for (std::size_t j = 0; j < d; ++j) {
        dot += a[j] * b[j];
        na += a[j] * a[j];
        nb += b[j] * b[j];
      }
      const double denom = std::sqrt(na) * std::sqrt(nb);
      return denom > 0.0 ? 1.0 - dot / denom : 1.0;
    }
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j)
      s += (a[j] - b[j]) * (a[j] - b[j]);
    return std::sqrt(s);
  };

  RankingResult res;
  std::size_t excluded = 0;
  for (std::size_t q = 0; q < nq; ++q) {
    const std::size_t id = qmeta.identities[q], cam = qmeta.cameras[q];
    std::vector<std::size_t> keep;
    std::vector<double> dist;
    bool any_match = false;
    for (std::size_t g = 0; g < ng; ++g) {
      if (gmeta.identities[g] == id && gmeta.cameras[g] == cam)
        continue;
      keep.push_back(g);
      any_match |= gmeta.identities[g] == id;
    }
    if (!any_match) {
      ++excluded;
      continue;
    }
    std::vector<double> dall(ng);
    for (auto g : keep)
      dall[g] = distance(q, g);
    std::stable_sort(keep.begin(), keep.end(), [&](std::size_t a, std::size_t b) {
      if (dall[a] != dall[b])
        return dall[a] < dall[b];
      const bool ra = gmeta.identities[a] == id, rb = gmeta.identities[b] == id;
      if (ra != rb)
        return !ra; // pessimistic: non-matches first among ties
      return a < b;
    });
    std::vector<bool> rel;
    for (auto g : keep) {
      dist.push_back(dall[g]);
      rel.push_back(gmeta.identities[g] == id);
    }
    res.queries.push_back(q);
    res.ap.push_back(average_precision(rel));
    res.first_match.push_back(
        static_cast<std::size_t>(std::find(rel.begin(), rel.end(), true) -
                                 rel.begin()) +
        1);
    res.order.push_back(std::move(keep));
    res.distances.push_back(std::move(dist));
  }
  if (res.queries.empty())
    throw std::invalid_argument("rank_and_score: no query has a usable match");

  report.n_queries = res.queries.size();
  report.n_gallery = ng;
  report.excluded_queries = excluded;
  report.mAP = std::accumulate(res.ap.begin(), res.ap.end(), 0.0) /
               static_cast<double>(res.ap.size());
  report.cmc1 = cmc_at(res, 1);
  report.cmc5 = cmc_at(res, 5);
  report.cmc10 = cmc_at(res, 10);
  return res;
}

double cmc_at(const RankingResult &r, std::size_t k) {
  if (r.first_match.empty())
    return 0.0;
  std::size_t hit = 0;
  for (auto f : r.first_match)
    hit += f <= k;
  return static_cast<double>(hit) / static_cast<double>(r.first_match.size());
}

double domain_probe(const Tensor &features, const std::vector<Domain> &domains,
                    std::uint64_t seed, const std::vector<std::size_t> &groups) {
  if (features.rank() != 2 || features.dim(0) != domains.size())
    throw DimensionError("domain_probe: expected [n, d] features with n tags");
  const std::size_t n = features.dim(0), d = features.dim(1);
  const auto n_target = static_cast<std::size_t>(
      std::count(domains.begin(), domains.end(), Domain::target));
  if (n_target == 0 || n_target == n)
    throw std::invalid_argument("domain_probe: both domains must be present");

  if (!groups.empty() && groups.size() != n)
    throw DimensionError("domain_probe: expected one group per sample");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::size_t n_train = 0;
  if (groups.empty()) {
    std::shuffle(order.begin(), order.end(), rng);
    n_train = std::max<std::size_t>(1, n * 7 / 10);
  } else {
    std::vector<std::size_t> ids(groups);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(std::max<std::size_t>(1, ids.size() * 7 / 10));
    std::sort(ids.begin(), ids.end());
    const auto in_train = [&](std::size_t i) {
      return std::binary_search(ids.begin(), ids.end(), groups[i]);
    };
    n_train = static_cast<std::size_t>(
        std::stable_partition(order.begin(), order.end(), in_train) -
        order.begin());
  }
  if (n_train >= n)
    throw std::invalid_argument("domain_probe: too few samples to hold out");

  const auto x = features.data();
  std::vector<double> mu(d, 0.0), sd(d, 0.0);
  for (std::size_t k = 0; k < n_train; ++k)
    for (std::size_t j = 0; j < d; ++j)
      mu[j] += x[order[k] * d + j];
  for (auto &m : mu)
    m /= static_cast<double>(n_train);
  for (std::size_t k = 0; k < n_train; ++k)
    for (std::size_t j = 0; j < d; ++j) {
      const double t = x[order[k] * d + j] - mu[j];
      sd[j] += t * t;
    }
  for (auto &s : sd)
    s = std::sqrt(s / static_cast<double>(n_train)) + 1e-8;

  std::vector<double> z(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      z[i * d + j] = (x[i * d + j] - mu[j]) / sd[j];

  std::vector<double> w(d, 0.0);
  double b = 0.0;
  const double lr = 0.5, l2 = 1e-3;
  for (int it = 0; it < 500; ++it) {
    std::vector<double> gw(d, 0.0);
    double gb = 0.0;
    for (std::size_t k = 0; k < n_train; ++k) {
      const std::size_t i = order[k];
      double s = b;
      for (std::size_t j = 0; j < d; ++j)
        s += w[j] * z[i * d + j];
      const double p = s >= 0 ? 1.0 / (1.0 + std::exp(-s))
                              : std::exp(s) / (1.0 + std::exp(s));
      const double err = p - (domains[i] == Domain::target ? 1.0 : 0.0);
      for (std::size_t j = 0; j < d; ++j)
        gw[j] += err * z[i * d + j];
      gb += err;
    }
    for (std::size_t j = 0; j < d; ++j)
      w[j] -= lr * (gw[j] / static_cast<double>(n_train) + l2 * w[j]);
    b -= lr * gb / static_cast<double>(n_train);
  }

  std::size_t correct = 0;
  for (std::size_t k = n_train; k < n; ++k) {
    const std::size_t i = order[k];
    double s = b;
    for (std::size_t j = 0; j < d; ++j)
      s += w[j] * z[i * d + j];
    correct += (s > 0.0) == (domains[i] == Domain::target);
  }
  return static_cast<double>(correct) / static_cast<double>(n - n_train);
}

AttentionMaps attention_maps(const Tensor &image, DaamParams &params,
                             bool attention) {
  NoGradScope no_grad;
  const auto fa = forward(image, params, {Mode::eval, attention, true});
  const Tensor &A = fa.attention.A;
  const std::size_t h = A.dim(1), w = A.dim(2), c = A.dim(3);
  AttentionMaps m;
  m.height = h;
  m.width = w;
  m.A = reshape(A, {h, w, c}).clone();
  m.shared.assign(h * w, 0.0);
  m.specific.assign(h * w, 0.0);
  for (std::size_t p = 0; p < h * w; ++p) {
    double s = 0.0, t = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      s += A[p * c + k];
      t += 1.0 - A[p * c + k];
    }
    m.shared[p] = s / static_cast<double>(c);
    m.specific[p] = t / static_cast<double>(c);
  }
  return m;
}

void write_pgm(const std::filesystem::path &path,
               const std::vector<double> &values, std::size_t height,
               std::size_t width) {
  if (values.size() != height * width)
    throw DimensionError("write_pgm: value count does not match extents");
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << width << " " << height << "\n255\n";
  for (double v : values) {
    const double t = *hi > *lo ? (v - *lo) / (*hi - *lo) : 128.0 / 255.0;
    out.put(static_cast<char>(
        static_cast<unsigned char>(std::lround(std::clamp(t, 0.0, 1.0) * 255.0))));
  }
  if (!out)
    throw std::runtime_error("write failed for " + path.string());
}

AttentionMaps export_attention(const Tensor &image, DaamParams &params,
                               const std::filesystem::path &prefix,
                               bool attention) {
  AttentionMaps m = attention_maps(image, params, attention);
  const std::string base = prefix.string();
  write_pgm(base + "_shared.pgm", m.shared, m.height, m.width);
  write_pgm(base + "_specific.pgm", m.specific, m.height, m.width);
  std::ofstream out(base + "_A.dtn", std::ios::binary | std::ios::trunc);
  if (!out)
    throw std::runtime_error("cannot write " + base + "_A.dtn");
  write_tensor(out, m.A);
  return m;
}

AttentionContrast attention_contrast(const Dataset &dataset, DaamParams &params,
                                     bool attention) {
  const std::size_t H = dataset.manifest.height, W = dataset.manifest.width;
  double fg = 0.0, bg = 0.0;
  std::size_t nfg = 0, nbg = 0;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto m = attention_maps(stack_images(dataset, {i}), params, attention);
    const auto mask = foreground_mask(dataset.samples[i], H, W);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t sy = y * m.height / H, sx = x * m.width / W;
        const double a = m.shared[sy * m.width + sx];
        if (mask[y * W + x]) {
          fg += a;
          ++nfg;
        } else {
          bg += a;
          ++nbg;
        }
      }
  }
  return {nfg ? fg / static_cast<double>(nfg) : 0.0,
          nbg ? bg / static_cast<double>(nbg) : 0.0};
}

std::string MetricsReport::to_json() const {
  nlohmann::json j{{"mAP", mAP},
                   {"cmc1", cmc1},
                   {"cmc5", cmc5},
                   {"cmc10", cmc10},
                   {"n_queries", n_queries},
                   {"n_gallery", n_gallery},
                   {"excluded_queries", excluded_queries},
                   {"iteration", iteration}};
  j["probe_sh"] = probe_sh ? nlohmann::json(*probe_sh) : nlohmann::json();
  j["probe_sp"] = probe_sp ? nlohmann::json(*probe_sp) : nlohmann::json();
  j["label_ari"] = label_ari ? nlohmann::json(*label_ari) : nlohmann::json();
  return j.dump(2);
}

MetricsReport MetricsReport::from_json(const std::string &text) {
  try {
    const auto j = nlohmann::json::parse(text);
    MetricsReport r;
    r.mAP = j.at("mAP").get<double>();
    r.cmc1 = j.at("cmc1").get<double>();
    r.cmc5 = j.at("cmc5").get<double>();
    r.cmc10 = j.at("cmc10").get<double>();
    r.n_queries = j.at("n_queries").get<std::size_t>();
    r.n_gallery = j.at("n_gallery").get<std::size_t>();
    r.excluded_queries = j.at("excluded_queries").get<std::size_t>();
    r.iteration = j.at("iteration").get<long>();
    if (!j.at("probe_sh").is_null())
      r.probe_sh = j.at("probe_sh").get<double>();
    if (!j.at("probe_sp").is_null())
      r.probe_sp = j.at("probe_sp").get<double>();
    if (j.contains("label_ari") && !j.at("label_ari").is_null())
      r.label_ari = j.at("label_ari").get<double>();
    return r;
  } catch (const nlohmann::json::exception &e) {
    throw FormatError(std::string("metrics report: ") + e.what());
  }
}

std::string metrics_csv_header() {
  return "iteration,mAP,cmc1,cmc5,cmc10,probe_sh,probe_sp,label_ari";
}

std::string metrics_csv_row(const MetricsReport &r) {
  auto opt = [](const std::optional<double> &v) {
    if (!v)
      return std::string();
    char b[32];
    std::snprintf(b, sizeof(b), "%.6f", *v);
    return std::string(b);
  };
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%ld,%.6f,%.6f,%.6f,%.6f,", r.iteration, r.mAP,
                r.cmc1, r.cmc5, r.cmc10);
  return buf + opt(r.probe_sh) + "," + opt(r.probe_sp) + "," +
         opt(r.label_ari);
}

} // namespace daam
