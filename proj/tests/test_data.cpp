// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"

#include "daam/data.hpp"

using namespace daam;

namespace {

GenConfig small_config() {
  GenConfig c;
  c.n_source_identities = 4;
  c.n_target_identities = 4;
  c.n_eval_identities = 3;
  c.samples_per_identity = 3;
  c.eval_samples_per_identity = 4;
  c.n_cameras = 2;
  c.seed = 7;
  return c;
}

// Plain logistic regression by full-batch gradient descent on standardized
// features; returns held-out accuracy.
double probe_accuracy(const std::vector<std::vector<double>> &x,
                      const std::vector<int> &y, std::uint64_t seed) {
  const std::size_t n = x.size(), d = x[0].size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_train = n * 7 / 10;

  std::vector<double> mu(d, 0.0), sd(d, 0.0);
  for (std::size_t k = 0; k < n_train; ++k)
    for (std::size_t j = 0; j < d; ++j)
      mu[j] += x[order[k]][j] / static_cast<double>(n_train);
  for (std::size_t k = 0; k < n_train; ++k)
    for (std::size_t j = 0; j < d; ++j)
      sd[j] += std::pow(x[order[k]][j] - mu[j], 2) / static_cast<double>(n_train);
  for (auto &s : sd)
    s = std::sqrt(s) + 1e-8;
  auto feat = [&](std::size_t i, std::size_t j) { return (x[i][j] - mu[j]) / sd[j]; };

  std::vector<double> w(d, 0.0);
  double b = 0.0;
  for (int it = 0; it < 200; ++it) {
    std::vector<double> gw(d, 0.0);
    double gb = 0.0;
    for (std::size_t k = 0; k < n_train; ++k) {
      const std::size_t i = order[k];
      double z = b;
      for (std::size_t j = 0; j < d; ++j)
        z += w[j] * feat(i, j);
      const double err = 1.0 / (1.0 + std::exp(-z)) - y[i];
      for (std::size_t j = 0; j < d; ++j)
        gw[j] += err * feat(i, j);
      gb += err;
    }
    for (std::size_t j = 0; j < d; ++j)
      w[j] -= 0.1 * gw[j] / static_cast<double>(n_train);
    b -= 0.1 * gb / static_cast<double>(n_train);
  }
  std::size_t correct = 0;
  for (std::size_t k = n_train; k < n; ++k) {
    const std::size_t i = order[k];
    double z = b;
    for (std::size_t j = 0; j < d; ++j)
      z += w[j] * feat(i, j);
    correct += static_cast<int>(z > 0.0) == y[i];
  }
  return static_cast<double>(correct) / static_cast<double>(n - n_train);
}

double raw_pixel_probe(double delta) {
  GenConfig c;
  c.delta = delta;
  c.seed = 3;
  const Dataset s = generate_split(c, Domain::source, SplitRole::train, 125, 8, 0);
  const Dataset t = generate_split(c, Domain::target, SplitRole::train, 125, 8, 125);
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  for (const auto *ds : {&s, &t})
    for (const auto &r : ds->samples) {
      x.emplace_back(r.image.data().begin(), r.image.data().end());
      y.push_back(static_cast<int>(r.domain));
    }
  return probe_accuracy(x, y, 11);
}

} // namespace

TEST_CASE("generation counts and cameras") {
  const GenConfig c = small_config();
  const Dataset d = generate_split(c, Domain::source, SplitRole::train, 4, 3, 0);
  CHECK(d.manifest.n_samples == 12);
  CHECK(d.size() == 12);
  CHECK(d.camera_histogram() == std::vector<std::size_t>{6, 6});
  for (const auto &s : d.samples) {
    CHECK(s.identity_id < 4);
    for (double v : s.image.data()) {
      REQUIRE(v >= 0.0);
      REQUIRE(v <= 1.0);
    }
  }
}

TEST_CASE("generation is deterministic") {
  const GenConfig c = small_config();
  const auto a = generate(c), b = generate(c);
  CHECK(serialize_dataset(a.source_train) == serialize_dataset(b.source_train));
  CHECK(serialize_dataset(a.target_gallery) ==
        serialize_dataset(b.target_gallery));
  GenConfig other = c;
  other.seed = 8;
  CHECK(serialize_dataset(generate(other).source_train) !=
        serialize_dataset(a.source_train));
}

TEST_CASE("splits keep identities apart") {
  const auto g = generate(small_config());
  std::set<std::size_t> src, tgt, eval;
  for (std::size_t i = 0; i < g.source_train.size(); ++i)
    src.insert(g.source_train.global_identity(i));
  for (std::size_t i = 0; i < g.target_train.size(); ++i)
    tgt.insert(g.target_train.global_identity(i));
  for (std::size_t i = 0; i < g.target_query.size(); ++i)
    eval.insert(g.target_query.global_identity(i));
  for (auto id : src) {
    CHECK(tgt.count(id) == 0);
    CHECK(eval.count(id) == 0);
  }
  for (auto id : tgt)
    CHECK(eval.count(id) == 0);
  // Identity latents are distinct across the source/target boundary.
  CHECK(g.source_train.samples[0].identity_latent !=
        g.target_train.samples[0].identity_latent);
}

TEST_CASE("every query identity has a gallery match under another camera") {
  const auto g = generate(small_config());
  CHECK(g.target_query.size() == 3);
  CHECK(g.target_gallery.size() == 9);
  for (const auto &q : g.target_query.samples) {
    bool found = false;
    for (const auto &r : g.target_gallery.samples)
      found |= r.identity_id == q.identity_id && r.camera_id != q.camera_id;
    CHECK(found);
    for (const auto &r : g.target_gallery.samples)
      if (r.identity_id == q.identity_id)
        CHECK(r.identity_latent == q.identity_latent);
  }
}

TEST_CASE("infeasible configurations are rejected") {
  GenConfig c = small_config();
  c.n_cameras = 1;
  CHECK_THROWS_AS(generate(c), ConfigError);
  c = small_config();
  c.samples_per_identity = 1;
  CHECK_THROWS_AS(generate(c), ConfigError);
  c = small_config();
  c.eval_samples_per_identity = 1;
  CHECK_THROWS_AS(generate(c), ConfigError);
  c = small_config();
  c.delta = -0.1;
  CHECK_THROWS_AS(generate(c), ConfigError);
}

TEST_CASE("foreground mask covers the body and not the border") {
  const auto d = generate_split(small_config(), Domain::source,
                                SplitRole::train, 2, 2, 0);
  const auto mask = foreground_mask(d.samples[0], 16, 8);
  const auto fg = std::count(mask.begin(), mask.end(), true);
  CHECK(fg > 16);
  CHECK(fg < 16 * 8 - 16);
  CHECK_FALSE(mask[0]);
  CHECK_FALSE(mask[7]);
}

TEST_CASE("domain shift leaves the body pattern untouched at delta 0") {
  GenConfig c = small_config();
  c.delta = 0.0;
  c.pixel_noise = 0.0;
  c.illumination_jitter = 0.0;
  const auto s = generate_split(c, Domain::source, SplitRole::train, 1, 8, 5);
  const auto t = generate_split(c, Domain::target, SplitRole::train, 1, 8, 5);
  std::size_t compared = 0;
  // Same global identity and no noise: images agree except for the per-sample
  // pose and background offset, so compare foreground pixels at equal pose.
  for (const auto &a : s.samples)
    for (const auto &b : t.samples) {
      if (a.domain_factors[kPoseDy] != b.domain_factors[kPoseDy] ||
          a.domain_factors[kPoseDx] != b.domain_factors[kPoseDx] ||
          a.camera_id != b.camera_id)
        continue;
      ++compared;
      const auto mask = foreground_mask(a, 16, 8);
      for (std::size_t p = 0; p < mask.size(); ++p)
        if (mask[p])
          for (std::size_t ch = 0; ch < 3; ++ch)
            CHECK(a.image.data()[p * 3 + ch] ==
                  doctest::Approx(b.image.data()[p * 3 + ch]).epsilon(1e-12));
    }
  CHECK(compared > 0);
}

TEST_CASE("raw-pixel domain probe is at chance without shift") {
  const double acc = raw_pixel_probe(0.0);
  CHECK(acc >= 0.45);
  CHECK(acc <= 0.55);
  CHECK(raw_pixel_probe(1.0) > 0.95);
}

TEST_CASE("dataset file round trip") {
  const auto g = generate(small_config());
  for (const auto *d : {&g.source_train, &g.target_query}) {
    const std::string bytes = serialize_dataset(*d);
    const Dataset back = deserialize_dataset(bytes);
    CHECK(serialize_dataset(back) == bytes);
    REQUIRE(back.size() == d->size());
    for (std::size_t i = 0; i < d->size(); ++i) {
      CHECK(back.samples[i].identity_id == d->samples[i].identity_id);
      CHECK(back.samples[i].camera_id == d->samples[i].camera_id);
      CHECK(back.samples[i].domain == d->samples[i].domain);
      CHECK(std::equal(back.samples[i].image.data().begin(),
                       back.samples[i].image.data().end(),
                       d->samples[i].image.data().begin()));
    }
  }
  const auto path = std::filesystem::temp_directory_path() / "daam_rt.drid";
  save_dataset(g.source_train, path);
  CHECK(serialize_dataset(load_dataset(path)) ==
        serialize_dataset(g.source_train));
  std::filesystem::remove(path);
}

TEST_CASE("dataset file corruption is detected") {
  const auto d = generate(small_config()).source_train;
  std::string bytes = serialize_dataset(d);

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(deserialize_dataset(bad_magic), FormatError);

  std::string bad_version = bytes;
  bad_version[4] = 9;
  CHECK_THROWS_AS(deserialize_dataset(bad_version), FormatError);

  // Drop the last sample's worth of payload but keep the manifest.
  CHECK_THROWS_AS(deserialize_dataset(bytes.substr(0, bytes.size() - 100)),
                  IntegrityError);

  // Manifest claims one more sample than the payload holds.
  Dataset lying = d;
  lying.samples.pop_back();
  std::string short_bytes = serialize_dataset(lying);
  const std::string from = "\"n_samples\":11";
  const auto at = short_bytes.find(from);
  REQUIRE(at != std::string::npos);
  short_bytes.replace(at, from.size(), "\"n_samples\":12");
  CHECK_THROWS_AS(deserialize_dataset(short_bytes), IntegrityError);

  CHECK_THROWS_AS(deserialize_dataset(bytes.substr(0, 8)), FormatError);
}

TEST_CASE("generation config JSON") {
  GenConfig c = small_config();
  c.delta = 0.5;
  const GenConfig back = gen_config_from_json(gen_config_to_json(c));
  CHECK(gen_config_to_json(back) == gen_config_to_json(c));
  CHECK(back.delta == 0.5);
  CHECK_THROWS_AS(gen_config_from_json("{\"n_cameras\": 2, \"bogus\": 1}"),
                  ConfigError);
  CHECK_THROWS_AS(gen_config_from_json("{not json"), ConfigError);
}

TEST_CASE("stack_images batches in index order") {
  const auto d = generate(small_config()).source_train;
  const Tensor b = stack_images(d, {2, 0});
  CHECK(b.shape() == Shape{2, 16, 8, 3});
  CHECK(b.data()[0] == d.samples[2].image.data()[0]);
  CHECK(b.data()[16 * 8 * 3] == d.samples[0].image.data()[0]);
}
