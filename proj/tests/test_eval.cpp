// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

#include "daam/eval.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace daam;
namespace fs = std::filesystem;

namespace {

// Interpolation-free AP as a sum over ranks of precision times recall gain.
double ap_by_recall_steps(const std::vector<bool> &rel) {
  const double m = static_cast<double>(std::count(rel.begin(), rel.end(), true));
  double ap = 0.0, hits = 0.0, prev_recall = 0.0;
  for (std::size_t k = 0; k < rel.size(); ++k) {
    hits += rel[k];
    const double recall = hits / m;
    ap += hits / static_cast<double>(k + 1) * (recall - prev_recall);
    prev_recall = recall;
  }
  return ap;
}

struct Instance {
  Tensor q, g;
  RetrievalMeta qm, gm;
};

Instance random_instance(std::mt19937_64 &rng, bool quantized) {
  std::uniform_int_distribution<std::size_t> nq_d(1, 8), ng_d(1, 50), d_d(1, 6),
      id_d(0, 5), cam_d(0, 2);
  const std::size_t nq = nq_d(rng), ng = ng_d(rng), d = d_d(rng);
  Instance in{testing::random_tensor({nq, d}, rng),
              testing::random_tensor({ng, d}, rng),
              {},
              {}};
  if (quantized) {
    for (auto &v : in.q.data())
      v = std::round(v * 2.0);
    for (auto &v : in.g.data())
      v = std::round(v * 2.0);
  }
  for (std::size_t i = 0; i < nq; ++i) {
    in.qm.identities.push_back(id_d(rng));
    in.qm.cameras.push_back(cam_d(rng));
  }
  for (std::size_t i = 0; i < ng; ++i) {
    in.gm.identities.push_back(id_d(rng));
    in.gm.cameras.push_back(cam_d(rng));
  }
  return in;
}

struct OracleScores {
  double mAP = 0.0, cmc1 = 0.0, cmc5 = 0.0, cmc10 = 0.0;
  std::size_t scored = 0, excluded = 0;
};

// Full distance matrix, rank of every relevant item counted directly:
// strictly closer items, tied non-matches and tied matches with lower index.
OracleScores brute_force(const Instance &in) {
  const std::size_t nq = in.q.dim(0), ng = in.g.dim(0), d = in.q.dim(1);
  std::vector<std::vector<double>> D(nq, std::vector<double>(ng));
  for (std::size_t i = 0; i < nq; ++i)
    for (std::size_t j = 0; j < ng; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double t = in.q[i * d + k] - in.g[j * d + k];
        s += t * t;
      }
      D[i][j] = std::sqrt(s);
    }
  OracleScores o;
  double ap_sum = 0.0;
  std::size_t c1 = 0, c5 = 0, c10 = 0;
  for (std::size_t i = 0; i < nq; ++i) {
    auto junk = [&](std::size_t j) {
      return in.gm.identities[j] == in.qm.identities[i] &&
             in.gm.cameras[j] == in.qm.cameras[i];
    };
    auto rel = [&](std::size_t j) {
      return !junk(j) && in.gm.identities[j] == in.qm.identities[i];
    };
    std::size_t m = 0;
    for (std::size_t j = 0; j < ng; ++j)
      m += rel(j);
    if (m == 0) {
      ++o.excluded;
      continue;
    }
    ++o.scored;
    double ap = 0.0;
    std::size_t best = ng + 1;
    for (std::size_t j = 0; j < ng; ++j) {
      if (!rel(j))
        continue;
      std::size_t rank = 0, hits = 0;
      for (std::size_t t = 0; t < ng; ++t) {
        if (junk(t))
          continue;
        const bool before = D[i][t] < D[i][j] ||
                            (D[i][t] == D[i][j] && (!rel(t) || t <= j));
        if (before) {
          ++rank;
          hits += rel(t);
        }
      }
      ap += static_cast<double>(hits) / static_cast<double>(rank);
      best = std::min(best, rank);
    }
    ap_sum += ap / static_cast<double>(m);
    c1 += best <= 1;
    c5 += best <= 5;
    c10 += best <= 10;
  }
  if (o.scored) {
    const double s = static_cast<double>(o.scored);
    o.mAP = ap_sum / s;
    o.cmc1 = c1 / s;
    o.cmc5 = c5 / s;
    o.cmc10 = c10 / s;
  }
  return o;
}

Instance permute_gallery(const Instance &in, std::mt19937_64 &rng) {
  const std::size_t ng = in.g.dim(0), d = in.g.dim(1);
  std::vector<std::size_t> p(ng);
  std::iota(p.begin(), p.end(), 0);
  std::shuffle(p.begin(), p.end(), rng);
  Instance out{in.q, Tensor({ng, d}), in.qm, {}};
  for (std::size_t j = 0; j < ng; ++j) {
    for (std::size_t k = 0; k < d; ++k)
      out.g[j * d + k] = in.g[p[j] * d + k];
    out.gm.identities.push_back(in.gm.identities[p[j]]);
    out.gm.cameras.push_back(in.gm.cameras[p[j]]);
  }
  return out;
}

GenConfig small_gen() {
  GenConfig g;
  g.n_source_identities = 4;
  g.n_target_identities = 4;
  g.n_eval_identities = 4;
  g.samples_per_identity = 4;
  g.eval_samples_per_identity = 4;
  return g;
}

fs::path scratch_dir(const std::string &name) {
  auto p = fs::temp_directory_path() / ("daam_eval_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

} // namespace

TEST_CASE("average precision worked examples") {
  // relevant at ranks 1 and 3 of 5
  const std::vector<bool> rel{true, false, true, false, false};
  CHECK(average_precision(rel) == doctest::Approx(0.83333333333333337).epsilon(1e-15));
  CHECK(average_precision({true, true, true}) == 1.0);
  CHECK(average_precision({false, false}) == 0.0);

  // every placement of 1..5 relevant items among 5 ranks
  for (unsigned mask = 1; mask < 32; ++mask) {
    std::vector<bool> r(5);
    for (unsigned b = 0; b < 5; ++b)
      r[b] = (mask >> b) & 1u;
    CHECK(average_precision(r) == doctest::Approx(ap_by_recall_steps(r)).epsilon(1e-14));
    CHECK(average_precision(r) <= 1.0);
    CHECK(average_precision(r) > 0.0);
  }
}

TEST_CASE("rank_and_score matches a brute-force oracle") {
  std::mt19937_64 rng(2024);
  std::size_t checked = 0;
  for (int trial = 0; trial < 400; ++trial) {
    const auto in = random_instance(rng, trial % 2 == 1);
    const auto oracle = brute_force(in);
    MetricsReport rep;
    if (oracle.scored == 0) {
      CHECK_THROWS_AS(rank_and_score(in.q, in.qm, in.g, in.gm, rep),
                      std::invalid_argument);
      continue;
    }
    ++checked;
    const auto res = rank_and_score(in.q, in.qm, in.g, in.gm, rep);
    CHECK(std::abs(rep.mAP - oracle.mAP) <= 1e-12);
    CHECK(std::abs(rep.cmc1 - oracle.cmc1) <= 1e-12);
    CHECK(std::abs(rep.cmc5 - oracle.cmc5) <= 1e-12);
    CHECK(std::abs(rep.cmc10 - oracle.cmc10) <= 1e-12);
    CHECK(rep.excluded_queries == oracle.excluded);
    CHECK(rep.n_queries == oracle.scored);
    CHECK(rep.cmc1 <= rep.cmc5);
    CHECK(rep.cmc5 <= rep.cmc10);
    for (std::size_t q = 0; q < res.order.size(); ++q) {
      CHECK(std::is_sorted(res.distances[q].begin(), res.distances[q].end()));
      CHECK(res.ap[q] >= 0.0);
      CHECK(res.ap[q] <= 1.0);
    }

    const auto perm = permute_gallery(in, rng);
    MetricsReport rp;
    rank_and_score(perm.q, perm.qm, perm.g, perm.gm, rp);
    CHECK(std::abs(rp.mAP - rep.mAP) <= 1e-12);
    CHECK(rp.cmc1 == rep.cmc1);
    CHECK(rp.cmc5 == rep.cmc5);
    CHECK(rp.cmc10 == rep.cmc10);
  }
  CHECK(checked >= 200);
}

TEST_CASE("rank_and_score exclusions and trivial cases") {
  // query id 0 cam 0; gallery: same id same cam (junk), same id other cam,
  // two distractors
  Tensor q({1, 2}, {0.0, 0.0});
  Tensor g({4, 2}, {0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 2.0, 0.0});
  RetrievalMeta qm{{0}, {0}};
  RetrievalMeta gm{{0, 0, 1, 2}, {0, 1, 0, 0}};
  MetricsReport rep;
  auto res = rank_and_score(q, qm, g, gm, rep);
  CHECK(rep.cmc1 == 1.0);
  CHECK(rep.mAP == 1.0);
  CHECK(res.order[0].size() == 3);
  CHECK(res.order[0][0] == 1);

  // all remaining gallery items relevant
  RetrievalMeta all{{0, 0, 0, 0}, {1, 1, 2, 2}};
  rank_and_score(q, qm, g, all, rep);
  CHECK(rep.mAP == 1.0);

  // second query has no cross-camera match and is excluded
  Tensor q2({2, 2}, {0.0, 0.0, 3.0, 3.0});
  RetrievalMeta qm2{{0, 5}, {0, 0}};
  rank_and_score(q2, qm2, g, gm, rep);
  CHECK(rep.n_queries == 1);
  CHECK(rep.excluded_queries == 1);

  RetrievalMeta none{{7}, {0}};
  CHECK_THROWS_AS(rank_and_score(q, none, g, gm, rep), std::invalid_argument);
  CHECK_THROWS_AS(rank_and_score(Tensor({1, 3}), qm, g, gm, rep), DimensionError);
}

TEST_CASE("ties are broken against the query") {
  // both candidates at the same distance: the distractor ranks first
  Tensor q({1, 1}, {0.0});
  Tensor g({2, 1}, {1.0, -1.0});
  RetrievalMeta qm{{0}, {0}};
  RetrievalMeta gm{{0, 1}, {1, 1}};
  MetricsReport rep;
  rank_and_score(q, qm, g, gm, rep);
  CHECK(rep.cmc1 == 0.0);
  CHECK(rep.mAP == doctest::Approx(0.5));
}

TEST_CASE("cosine ranking") {
  Tensor q({1, 2}, {1.0, 0.0});
  Tensor g({2, 2}, {10.0, 0.5, 0.5, 0.0});
  RetrievalMeta qm{{0}, {0}};
  RetrievalMeta gm{{1, 0}, {1, 1}};
  MetricsReport euc, cos;
  rank_and_score(q, qm, g, gm, euc);
  rank_and_score(q, qm, g, gm, cos, {true});
  CHECK(euc.cmc1 == 1.0);
  CHECK(cos.cmc1 == 1.0);
  Tensor g2({2, 2}, {0.4, 0.0, 10.0, 1.0});
  RetrievalMeta gm2{{1, 0}, {1, 1}};
  rank_and_score(q, qm, g2, gm2, euc);
  rank_and_score(q, qm, g2, gm2, cos, {true});
  CHECK(euc.cmc1 == 0.0);
  CHECK(cos.cmc1 == 0.0);
}

TEST_CASE("domain probe examples") {
  const std::size_t n = 200;
  std::vector<Domain> dom(n);
  for (std::size_t i = 0; i < n; ++i)
    dom[i] = i % 2 ? Domain::target : Domain::source;

  Tensor tag({n, 3});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      tag[i * 3 + j] = dom[i] == Domain::target ? 1.0 : 0.0;
  CHECK(domain_probe(tag, dom, 5) == 1.0);

  std::mt19937_64 rng(99);
  const auto noise = testing::random_tensor({n, 16}, rng);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const double acc = domain_probe(noise, dom, seed);
    CHECK(acc >= 0.35);
    CHECK(acc <= 0.65);
    CHECK(domain_probe(noise, dom, seed) == acc);
  }

  std::vector<Domain> one(n, Domain::source);
  CHECK_THROWS_AS(domain_probe(noise, one, 1), std::invalid_argument);
  CHECK_THROWS_AS(domain_probe(Tensor({3, 2}), dom, 1), DimensionError);
}

TEST_CASE("domain_probe grouped split keeps groups on one side") {
  // Features identify the group but carry no domain signal beyond it.
  const std::size_t groups = 20, per = 6, d = 32;
  std::mt19937_64 rng(7);
  const auto centres = testing::random_tensor({groups, d}, rng);
  std::normal_distribution<double> jitter(0.0, 0.05);
  Tensor x({groups * per, d});
  std::vector<Domain> dom;
  std::vector<std::size_t> ids;
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t k = 0; k < per; ++k) {
      const std::size_t i = g * per + k;
      for (std::size_t j = 0; j < d; ++j)
        x[i * d + j] = centres[g * d + j] + jitter(rng);
      dom.push_back(g % 2 ? Domain::target : Domain::source);
      ids.push_back(g);
    }
  double mixed = 0.0, grouped = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    mixed += domain_probe(x, dom, seed) / 5.0;
    grouped += domain_probe(x, dom, seed, ids) / 5.0;
    CHECK(domain_probe(x, dom, seed, ids) ==
          domain_probe(x, dom, seed, ids));
  }
  MESSAGE("per-sample " << mixed << ", grouped " << grouped);
  CHECK(mixed >= 0.9);
  CHECK(grouped <= 0.7);
  CHECK_THROWS_AS(domain_probe(x, dom, 1, std::vector<std::size_t>(3, 0)),
                  DimensionError);
}

TEST_CASE("extract_features contract") {
  const auto ds = generate_split(small_gen(), Domain::target, SplitRole::train,
                                 3, 2, 0);
  auto params = init_params(BackboneConfig{}, HeadSizes{3, 2}, 11);
  Dataset dup = ds;
  dup.samples.push_back(ds.samples[0]);
  const auto fs1 = extract_features(dup, params, {2, true});
  const std::size_t n = dup.size(), d = params.config.embed_dim;
  REQUIRE(fs1.f_sh.shape() == Shape{n, d});
  REQUIRE(fs1.f_sp.shape() == Shape{n, d});
  for (std::size_t j = 0; j < d; ++j)
    CHECK(fs1.f_sh[j] == fs1.f_sh[(n - 1) * d + j]);
  for (double v : fs1.f_sh.data())
    CHECK(v >= 0.0);
  for (double v : fs1.f_sp.data())
    CHECK(v >= 0.0);

  // batching does not change eval-mode output
  const auto fs2 = extract_features(dup, params, {64, true});
  CHECK(testing::bit_equal(fs1.f_sh, fs2.f_sh));
}

TEST_CASE("attention maps and export") {
  const auto ds = generate_split(small_gen(), Domain::source, SplitRole::train,
                                 2, 1, 0);
  auto params = init_params(BackboneConfig{}, HeadSizes{2, 2}, 4);
  const auto img = stack_images(ds, {0});
  const auto dir = scratch_dir("attn");
  const auto m = export_attention(img, params, dir / "s0");
  REQUIRE(m.shared.size() == m.height * m.width);
  for (std::size_t p = 0; p < m.shared.size(); ++p)
    CHECK(m.shared[p] + m.specific[p] == doctest::Approx(1.0).epsilon(1e-15));

  std::ifstream pgm(dir / "s0_shared.pgm", std::ios::binary);
  std::string magic;
  std::size_t w = 0, h = 0, maxv = 0;
  pgm >> magic >> w >> h >> maxv;
  pgm.get();
  CHECK(magic == "P5");
  CHECK(w == m.width);
  CHECK(h == m.height);
  CHECK(maxv == 255);
  std::vector<char> px((std::istreambuf_iterator<char>(pgm)),
                       std::istreambuf_iterator<char>());
  CHECK(px.size() == w * h);

  std::ifstream dtn(dir / "s0_A.dtn", std::ios::binary);
  const auto A = read_tensor(dtn);
  CHECK(A.shape() == Shape{m.height, m.width, params.config.feature_channels()});

  // disabled attention: A = 0.5 and a uniform mid-grey image
  const auto flat = attention_maps(img, params, false);
  for (double v : flat.shared)
    CHECK(v == 0.5);
  write_pgm(dir / "flat.pgm", flat.shared, flat.height, flat.width);
  std::ifstream fp(dir / "flat.pgm", std::ios::binary);
  fp >> magic >> w >> h >> maxv;
  fp.get();
  std::vector<unsigned char> fpx((std::istreambuf_iterator<char>(fp)),
                                 std::istreambuf_iterator<char>());
  REQUIRE(fpx.size() == w * h);
  for (auto v : fpx)
    CHECK(v == 128);

  CHECK_THROWS_AS(write_pgm(dir / "bad.pgm", {1.0}, 2, 2), DimensionError);
  CHECK_THROWS(write_pgm(dir / "missing" / "x.pgm", {1.0}, 1, 1));

  const auto c = attention_contrast(ds, params, false);
  CHECK(c.foreground == 0.5);
  CHECK(c.background == 0.5);
  fs::remove_all(dir);
}

TEST_CASE("metrics report serialization") {
  MetricsReport r;
  r.mAP = 0.5;
  r.cmc1 = 0.25;
  r.cmc5 = 0.75;
  r.cmc10 = 1.0;
  r.n_queries = 4;
  r.n_gallery = 20;
  r.iteration = 3;
  r.probe_sp = 0.9;
  const auto back = MetricsReport::from_json(r.to_json());
  CHECK(back.mAP == 0.5);
  CHECK(back.iteration == 3);
  CHECK(!back.probe_sh.has_value());
  CHECK(back.probe_sp.value() == 0.9);
  CHECK(!back.label_ari.has_value());
  r.label_ari = 0.25;
  CHECK(MetricsReport::from_json(r.to_json()).label_ari.value() == 0.25);
  CHECK(metrics_csv_header() ==
        "iteration,mAP,cmc1,cmc5,cmc10,probe_sh,probe_sp,label_ari");
  CHECK(metrics_csv_row(r) ==
        "3,0.500000,0.250000,0.750000,1.000000,,0.900000,0.250000");
  CHECK_THROWS_AS(MetricsReport::from_json("{"), FormatError);
}
