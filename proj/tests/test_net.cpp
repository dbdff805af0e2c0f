// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"

#include "daam/data.hpp"
#include "daam/net.hpp"
#include "test_util.hpp"

using namespace daam;
using daam::testing::bit_equal;
using daam::testing::project;
using daam::testing::random_tensor;

namespace {

void zero(Tensor &t) {
  for (auto &v : t.data())
    v = 0.0;
}

DaamParams make_params(std::uint64_t seed = 1, std::size_t k = 3) {
  return init_params(BackboneConfig{}, HeadSizes{5, k}, seed);
}

Tensor images(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_tensor({n, 16, 8, 3}, rng, 0.0, 1.0);
}

double max_abs(const Tensor &t) {
  double m = 0.0;
  for (double v : t.data())
    m = std::max(m, std::abs(v));
  return m;
}

} // namespace

TEST_CASE("backbone output extents") {
  auto p = make_params();
  CHECK(backbone_forward(images(2, 1), p, Mode::train).shape() ==
        Shape{2, 16, 8, 32});
  CHECK(p.config.feature_extent() ==
        std::pair<std::size_t, std::size_t>{16, 8});

  BackboneConfig first_stride2;
  first_stride2.strides = {2, 1, 1};
  CHECK(first_stride2.feature_extent() ==
        std::pair<std::size_t, std::size_t>{8, 4});

  BackboneConfig all_stride2;
  all_stride2.strides = {2, 2, 2};
  CHECK(all_stride2.feature_extent() ==
        std::pair<std::size_t, std::size_t>{2, 1});
  auto q = init_params(all_stride2, HeadSizes{5, 3}, 1);
  CHECK(backbone_forward(images(2, 1), q, Mode::train).shape() ==
        Shape{2, 2, 1, 32});
}

TEST_CASE("backbone configuration errors") {
  auto p = make_params();
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(backbone_forward(random_tensor({1, 8, 8, 3}, rng), p,
                                   Mode::train),
                  ConfigError);
  BackboneConfig tiny;
  tiny.image_height = 2;
  tiny.image_width = 2;
  tiny.strides = {2, 2, 2};
  CHECK_THROWS_AS(tiny.validate(), ConfigError);
  BackboneConfig bad_r;
  bad_r.reduction = 5;
  CHECK_THROWS_AS(init_params(bad_r, HeadSizes{}, 1), ConfigError);
}

TEST_CASE("zero image with zero biases gives a zero feature map") {
  auto p = make_params();
  const Tensor F = backbone_forward(Tensor({2, 16, 8, 3}), p, Mode::train);
  CHECK(max_abs(F) == 0.0);
}

TEST_CASE("initialisation is deterministic per seed") {
  CHECK(params_hash(make_params(4)) == params_hash(make_params(4)));
  CHECK(params_hash(make_params(4)) != params_hash(make_params(5)));
  auto a = make_params(4), b = make_params(4);
  CHECK(bit_equal(forward(images(3, 2), a, {}).f_sh,
                  forward(images(3, 2), b, {}).f_sh));
}

TEST_CASE("spatial attention") {
  auto p = make_params();
  std::mt19937_64 rng(3);
  SUBCASE("zero weights give a zero map") {
    zero(p.spatial_kernel);
    zero(p.scale_kernel);
    const Tensor s = spatial_attention(random_tensor({2, 6, 4, 32}, rng), p);
    CHECK(max_abs(s) == 0.0);
  }
  SUBCASE("shape contract") {
    for (std::size_t h = 2; h <= 8; ++h)
      for (std::size_t w = 1; w <= 8; ++w) {
        const Tensor s = spatial_attention(random_tensor({h, w, 32}, rng), p);
        CHECK(s.shape() == Shape{h, w, 1});
      }
  }
  SUBCASE("gradient check") {
    Tensor F = random_tensor({2, 5, 3, 32}, rng);
    F.set_requires_grad(true);
    auto rep = grad_check([&] { return project(spatial_attention(F, p), 1); },
                          {{"F", F},
                           {"spatial.kernel", p.spatial_kernel},
                           {"spatial.bias", p.spatial_bias},
                           {"scale.kernel", p.scale_kernel},
                           {"scale.bias", p.scale_bias}});
    CHECK_MESSAGE(rep.passed(), "max rel error " << rep.max_rel_error);
  }
}

TEST_CASE("channel attention") {
  auto p = make_params();
  std::mt19937_64 rng(4);
  SUBCASE("zero W0 gives zero output") {
    zero(p.channel_w0);
    const Tensor c =
        channel_attention(random_tensor({2, 4, 4, 32}, rng), p.channel_w0,
                          p.channel_w1);
    CHECK(c.shape() == Shape{2, 32});
    CHECK(max_abs(c) == 0.0);
  }
  SUBCASE("constant input makes the output independent of extent") {
    Tensor w0 = random_tensor({8, 32}, rng, 0.0, 1.0);
    Tensor w1 = random_tensor({32, 8}, rng, 0.0, 1.0);
    const Tensor a = channel_attention(Tensor({2, 3, 32}, 0.7), w0, w1);
    const Tensor b = channel_attention(Tensor({7, 5, 32}, 0.7), w0, w1);
    for (std::size_t i = 0; i < a.numel(); ++i)
      CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-14));
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(channel_attention(random_tensor({2, 2, 16}, rng),
                                      p.channel_w0, p.channel_w1),
                    DimensionError);
  }
  SUBCASE("gradient check") {
    Tensor F = random_tensor({2, 3, 2, 32}, rng);
    F.set_requires_grad(true);
    auto rep = grad_check(
        [&] { return project(channel_attention(F, p.channel_w0, p.channel_w1), 2); },
        {{"F", F}, {"w0", p.channel_w0}, {"w1", p.channel_w1}});
    CHECK_MESSAGE(rep.passed(), "max rel error " << rep.max_rel_error);
  }
}

TEST_CASE("attention split") {
  auto p = make_params();
  std::mt19937_64 rng(5);

  SUBCASE("zero attention parameters give A = 0.5") {
    zero(p.spatial_kernel);
    zero(p.scale_kernel);
    zero(p.channel_w0);
    const Tensor F = random_tensor({2, 8, 4, 32}, rng);
    const auto a = attention_forward(F, p);
    for (std::size_t i = 0; i < F.numel(); ++i) {
      REQUIRE(a.A[i] == 0.5);
      REQUIRE(a.F_sh[i] == 0.5 * F[i]);
      REQUIRE(a.F_sp[i] == 0.5 * F[i]);
    }
  }

  SUBCASE("saturated attention empties the specific part") {
    // S = 1 everywhere via the scale bias; C = 30 per channel for F = 1.
    zero(p.spatial_kernel);
    zero(p.scale_kernel);
    p.scale_bias[0] = 1.0;
    for (auto &v : p.channel_w0.data())
      v = 1.0 / 32.0;
    for (auto &v : p.channel_w1.data())
      v = 30.0 / 8.0;
    const Tensor F({1, 8, 4, 32}, 1.0);
    const auto a = attention_forward(F, p);
    for (double r : a.raw.data())
      REQUIRE(r == 30.0);
    CHECK(max_abs(a.F_sp) < 1e-12 * max_abs(F));
  }

  SUBCASE("disabled attention holds A at one half") {
    const Tensor F = random_tensor({2, 8, 4, 32}, rng);
    const auto a = attention_forward(F, p, false);
    for (double v : a.A.data())
      REQUIRE(v == 0.5);
  }

  SUBCASE("reconstruction, range and rank-one structure") {
    for (std::uint64_t trial = 0; trial < 5; ++trial) {
      auto q = make_params(10 + trial);
      const Tensor F = random_tensor({2, 8, 4, 32}, rng, -2.0, 2.0);
      const auto a = attention_forward(F, q);
      for (std::size_t i = 0; i < F.numel(); ++i) {
        REQUIRE(std::abs(a.F_sh[i] + a.F_sp[i] - F[i]) <= 1e-15);
        REQUIRE(a.A[i] > 0.0);
        REQUIRE(a.A[i] < 1.0);
      }
      // Every 2x2 minor of the (position x channel) matrix of raw vanishes.
      const std::size_t hw = 32, c = 32;
      double worst = 0.0;
      for (std::size_t n = 0; n < 2; ++n) {
        auto at = [&](std::size_t pos, std::size_t ch) {
          return a.raw[(n * hw + pos) * c + ch];
        };
        for (std::size_t p0 = 0; p0 < hw; ++p0)
          for (std::size_t p1 = p0 + 1; p1 < hw; ++p1)
            for (std::size_t c0 = 0; c0 < c; ++c0)
              for (std::size_t c1 = c0 + 1; c1 < c; ++c1)
                worst = std::max(worst, std::abs(at(p0, c0) * at(p1, c1) -
                                                 at(p0, c1) * at(p1, c0)));
      }
      CHECK(worst < 1e-10);
    }
  }
}

TEST_CASE("embedding branches") {
  auto p = make_params();
  std::mt19937_64 rng(6);
  const Tensor F = random_tensor({4, 8, 4, 32}, rng, 0.0, 1.0);

  SUBCASE("zero projection gives zero embedding") {
    zero(p.dsh_fc);
    CHECK(max_abs(dsh_branch(F, p, Mode::train)) == 0.0);
    CHECK(max_abs(dsh_branch(F, p, Mode::eval)) == 0.0);
  }
  SUBCASE("embeddings are non-negative") {
    const Tensor f = dsh_branch(F, p, Mode::train);
    CHECK(f.shape() == Shape{4, 32});
    for (double v : f.data())
      REQUIRE(v >= 0.0);
  }
  SUBCASE("eval mode is repeatable and leaves running stats alone") {
    dsh_branch(F, p, Mode::train);
    const auto stats = p.dsh_bn.running_mean;
    const Tensor a = dsh_branch(F, p, Mode::eval);
    const Tensor b = dsh_branch(F, p, Mode::eval);
    CHECK(bit_equal(a, b));
    CHECK(p.dsh_bn.running_mean == stats);
  }
}

TEST_CASE("branch parameters are disjoint") {
  auto p = make_params();
  const Tensor x = images(4, 7);
  ForwardOptions eval{Mode::eval, true, true};
  const auto base = forward(x, p, eval);

  auto q = p.clone();
  q.dsp_fc[0] += 0.25;
  for (auto &v : q.dsp_bn.beta.data())
    v += 1.0;
  q.domain_w[0] += 1.0;
  const auto moved_sp = forward(x, q, eval);
  CHECK(bit_equal(base.f_sh, moved_sp.f_sh));
  CHECK_FALSE(bit_equal(base.f_sp, moved_sp.f_sp));

  auto r = p.clone();
  r.dsh_fc[0] += 0.25;
  for (auto &v : r.dsh_bn.beta.data())
    v += 1.0;
  const auto moved_sh = forward(x, r, eval);
  CHECK(bit_equal(base.f_sp, moved_sh.f_sp));
  CHECK_FALSE(bit_equal(base.f_sh, moved_sh.f_sh));

  CHECK_FALSE(p.dsh_fc.same_storage(p.dsp_fc));
  CHECK_FALSE(p.dsh_bn.gamma.same_storage(p.dsp_bn.gamma));
}

TEST_CASE("heads") {
  auto p = make_params();
  SUBCASE("zero embedding gives neutral predictions") {
    const Tensor f({3, 32});
    const auto h = heads_forward(f, &f, p);
    for (double v : h.p_occ.data())
      CHECK(v == 0.5);
    for (double v : h.p_src_id.data())
      CHECK(v == doctest::Approx(0.2).epsilon(1e-15));
  }
  SUBCASE("distributions are normalised") {
    const auto a = forward(images(3, 8), p, {});
    for (const Tensor *t :
         {&a.heads.p_src_id, &a.heads.p_tgt_id, &a.heads.p_domain}) {
      const std::size_t k = t->dim(1);
      for (std::size_t i = 0; i < 3; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j)
          s += (*t)[i * k + j];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
      }
    }
    CHECK(a.heads.p_domain.shape() == Shape{3, 2});
    CHECK(a.heads.p_tgt_id.shape() == Shape{3, 3});
  }
  SUBCASE("skipping the specific branch") {
    const auto a = forward(images(2, 8), p, {Mode::train, true, false});
    CHECK_FALSE(a.has_domain_specific);
    CHECK(a.heads.p_domain.numel() <= 1);
  }
  SUBCASE("joint gradient check") {
    std::mt19937_64 rng(9);
    Tensor fsh = random_tensor({3, 32}, rng, 0.0, 1.0);
    Tensor fsp = random_tensor({3, 32}, rng, 0.0, 1.0);
    fsh.set_requires_grad(true);
    fsp.set_requires_grad(true);
    auto f = [&] {
      const auto h = heads_forward(fsh, &fsp, p);
      return add(add(project(h.p_occ, 1), project(h.p_src_id, 2)),
                 add(project(h.p_tgt_id, 3), project(h.p_domain, 4)));
    };
    std::vector<NamedTensor> inputs{{"f_sh", fsh}, {"f_sp", fsp}};
    for (const auto &nt : p.learnable())
      if (nt.name.rfind("head.", 0) == 0)
        inputs.push_back(nt);
    auto rep = grad_check(f, inputs);
    CHECK_MESSAGE(rep.passed(), "max rel error " << rep.max_rel_error);
  }
}

TEST_CASE("parameter file round trip") {
  auto p = make_params(2);
  forward(images(4, 1), p, {}); // move the running statistics
  const std::string bytes = serialize_params(p);

  auto q = make_params(3);
  const auto res = deserialize_params(bytes, q);
  CHECK_FALSE(res.target_head_reinitialized);
  CHECK(serialize_params(q) == bytes);
  CHECK(q.backbone[0].bn.running_mean == p.backbone[0].bn.running_mean);

  const auto path = std::filesystem::temp_directory_path() / "daam_rt.dprm";
  save_params(p, path);
  auto r = make_params(4);
  load_params(path, r);
  CHECK(params_hash(r) == params_hash(p));
  std::filesystem::remove(path);
}

TEST_CASE("parameter file with a different cluster count") {
  auto p = make_params(2, 3);
  const std::string bytes = serialize_params(p);
  auto q = make_params(3, 6);
  const Tensor fresh = q.tgt_id_w.clone();
  const auto res = deserialize_params(bytes, q);
  CHECK(res.target_head_reinitialized);
  CHECK(q.n_clusters() == 6);
  CHECK(bit_equal(q.tgt_id_w, fresh));
  CHECK(bit_equal(q.dsh_fc, p.dsh_fc));
  CHECK(bit_equal(q.src_id_w, p.src_id_w));
  CHECK(bit_equal(q.backbone[2].kernel, p.backbone[2].kernel));
}

TEST_CASE("parameter file errors") {
  auto p = make_params(2);
  const std::string bytes = serialize_params(p);
  auto q = make_params(3);
  CHECK_THROWS_AS(deserialize_params(bytes.substr(0, bytes.size() / 2), q),
                  FormatError);
  std::string bad = bytes;
  bad[1] = 'X';
  CHECK_THROWS_AS(deserialize_params(bad, q), FormatError);
  CHECK_THROWS_AS(deserialize_params(bytes + "x", q), FormatError);

  auto other_ids = init_params(BackboneConfig{}, HeadSizes{6, 3}, 1);
  CHECK_THROWS_AS(deserialize_params(bytes, other_ids), FormatError);

  BackboneConfig wide;
  wide.channels = {8, 16, 64};
  auto other_cfg = init_params(wide, HeadSizes{5, 3}, 1);
  CHECK_THROWS_AS(deserialize_params(bytes, other_cfg), FormatError);
}

TEST_CASE("parameter groups") {
  const auto p = make_params();
  for (const auto &nt : p.learnable()) {
    const auto g = param_group(nt.name);
    CHECK_MESSAGE((g == "backbone" || g == "attention" || g == "dsh" ||
                   g == "dsp" || g == "occ" || g == "src_id" ||
                   g == "tgt_id" || g == "domain"),
                  nt.name);
  }
  CHECK(param_group("head.tgt_id.w") == "tgt_id");
  CHECK(param_group("backbone.1.kernel") == "backbone");
}
