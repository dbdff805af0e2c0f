// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"

#include "daam/grad_check.hpp"
#include "daam/ops.hpp"
#include "test_util.hpp"

using namespace daam;
using daam::testing::bit_equal;
using daam::testing::leaf;
using daam::testing::project;
using daam::testing::random_tensor;

namespace {

GradCheckReport check_unary(Tensor x, Tensor (*op)(const Tensor &),
                            double tol = 1e-5) {
  x.set_requires_grad(true);
  GradCheckOptions opt;
  opt.tol = tol;
  return grad_check([&] { return project(op(x), 99); }, {{"x", x}}, opt);
}

} // namespace

TEST_CASE("tensor construction and shape validation") {
  Tensor t({2, 3}, 1.5);
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
  CHECK_THROWS_AS(Tensor({2, 0}), DimensionError);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  CHECK(Tensor::scalar(4.0).item() == 4.0);
}

TEST_CASE("matmul") {
  SUBCASE("identity") {
    std::mt19937_64 rng(1);
    Tensor eye({3, 3}, std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor b = random_tensor({3, 2}, rng);
    CHECK(bit_equal(matmul(eye, b), b));
  }
  SUBCASE("hand arithmetic") {
    Tensor a({2, 2}, std::vector<double>{1, 2, 3, 4});
    Tensor b({2, 1}, std::vector<double>{1, 1});
    Tensor c = matmul(a, b);
    CHECK(c.shape() == Shape{2, 1});
    CHECK(c[0] == 3.0);
    CHECK(c[1] == 7.0);
  }
  SUBCASE("shape mismatch names both shapes") {
    try {
      matmul(Tensor({2, 3}), Tensor({2, 3}));
      FAIL("expected DimensionError");
    } catch (const DimensionError &e) {
      const std::string msg = e.what();
      CHECK(msg.find("[2x3]") != std::string::npos);
    }
  }
  SUBCASE("gradient vs central differences") {
    std::mt19937_64 rng(2);
    Tensor a = leaf(random_tensor({4, 5}, rng));
    Tensor b = leaf(random_tensor({5, 3}, rng));
    GradCheckOptions opt;
    opt.tol = 1e-6;
    auto rep = grad_check([&] { return project(matmul(a, b), 3); },
                          {{"a", a}, {"b", b}}, opt);
    CHECK(rep.entries.size() == 35);
    CHECK(rep.passed());
  }
}

TEST_CASE("conv2d") {
  SUBCASE("1x1 identity kernel") {
    std::mt19937_64 rng(4);
    Tensor x = random_tensor({5, 3, 1}, rng);
    Tensor k({1, 1, 1, 1}, 1.0);
    CHECK(bit_equal(conv2d(x, k, 1, 0), x));
  }
  SUBCASE("3x3 ones") {
    Tensor y = conv2d(Tensor({3, 3, 1}, 1.0), Tensor({3, 3, 1, 1}, 1.0), 1, 0);
    CHECK(y.shape() == Shape{1, 1, 1});
    CHECK(y[0] == 9.0);
  }
  SUBCASE("output extents") {
    Tensor y = conv2d(Tensor({16, 8, 3}), Tensor({3, 3, 3, 4}), 2, 1);
    CHECK(y.shape() == Shape{8, 4, 4});
    Tensor z = conv2d(Tensor({5, 3, 1}), Tensor({3, 3, 1, 1}), 2, 1);
    CHECK(z.shape() == Shape{3, 2, 1});
  }
  SUBCASE("kernel larger than padded input") {
    CHECK_THROWS_AS(conv2d(Tensor({2, 2, 1}), Tensor({5, 5, 1, 1}), 1, 1),
                    DimensionError);
  }
  SUBCASE("gradient, stride 2") {
    std::mt19937_64 rng(5);
    Tensor x = leaf(random_tensor({8, 4, 2}, rng));
    Tensor k = leaf(random_tensor({3, 3, 2, 3}, rng));
    auto rep = grad_check([&] { return project(conv2d(x, k, 2, 1), 6); },
                          {{"input", x}, {"kernel", k}});
    CHECK(rep.passed());
    rep = grad_check([&] { return project(conv2d(x, k, 2, 0), 7); },
                     {{"input", x}, {"kernel", k}});
    CHECK(rep.passed());
  }
  SUBCASE("batched equals per-sample") {
    std::mt19937_64 rng(8);
    Tensor a = random_tensor({4, 4, 2}, rng);
    Tensor b = random_tensor({4, 4, 2}, rng);
    Tensor k = random_tensor({3, 3, 2, 2}, rng);
    Tensor batch({2, 4, 4, 2});
    std::copy(a.data().begin(), a.data().end(), batch.data().begin());
    std::copy(b.data().begin(), b.data().end(), batch.data().begin() + 32);
    Tensor yb = conv2d(batch, k, 2, 1);
    Tensor ya = conv2d(a, k, 2, 1);
    Tensor y2 = conv2d(b, k, 2, 1);
    for (std::size_t i = 0; i < ya.numel(); ++i) {
      CHECK(yb[i] == ya[i]);
      CHECK(yb[ya.numel() + i] == y2[i]);
    }
  }
}

TEST_CASE("pooling") {
  SUBCASE("gap of constant") {
    Tensor y = global_avg_pool_spatial(Tensor({3, 2, 4}, 2.5));
    CHECK(y.shape() == Shape{4});
    for (double v : y.data())
      CHECK(v == doctest::Approx(2.5));
  }
  SUBCASE("gap 2x1x1") {
    Tensor y = global_avg_pool_spatial(Tensor({2, 1, 1}, std::vector<double>{1, 3}));
    CHECK(y.item() == 2.0);
  }
  SUBCASE("gap gradient is 1/(h*w)") {
    Tensor x = leaf(Tensor({3, 2, 2}, 0.3));
    Tape tape;
    {
      TapeScope scope(tape);
      tape.backward(sum(global_avg_pool_spatial(x)));
    }
    for (double g : x.grad())
      CHECK(g == doctest::Approx(1.0 / 6.0));
    std::mt19937_64 rng(9);
    CHECK(check_unary(random_tensor({3, 2, 4}, rng), global_avg_pool_spatial)
              .passed());
  }
  SUBCASE("channel pool") {
    Tensor one = Tensor({2, 2, 1}, std::vector<double>{1, 2, 3, 4});
    CHECK(bit_equal(avg_pool_channels(one), one));
    Tensor y = avg_pool_channels(Tensor({1, 1, 2}, std::vector<double>{2, 4}));
    CHECK(y.shape() == Shape{1, 1, 1});
    CHECK(y.item() == 3.0);
    std::mt19937_64 rng(10);
    CHECK(check_unary(random_tensor({3, 2, 4}, rng), avg_pool_channels).passed());
  }
}

TEST_CASE("elementwise suite") {
  CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);

  Tensor sm = softmax(Tensor({5}, 1.7));
  for (double v : sm.data())
    CHECK(v == doctest::Approx(0.2).epsilon(1e-15));

  SUBCASE("upsample nearest replication") {
    Tensor x({2, 1, 1}, std::vector<double>{3.0, 7.0});
    Tensor y = upsample_nearest(x, 4, 2);
    CHECK(y.shape() == Shape{4, 2, 1});
    const std::vector<double> expect{3, 3, 3, 3, 7, 7, 7, 7};
    for (std::size_t i = 0; i < 8; ++i)
      CHECK(y[i] == expect[i]);
  }

  SUBCASE("broadcast over trailing shape") {
    Tensor a({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
    Tensor b({3}, std::vector<double>{10, 20, 30});
    Tensor c = add(a, b);
    CHECK(c[0] == 11);
    CHECK(c[5] == 36);
    CHECK_THROWS_AS(add(a, Tensor({2})), DimensionError);
  }

  SUBCASE("non-finite intermediate names the op") {
    try {
      log(Tensor::scalar(0.0));
      FAIL("expected NumericError");
    } catch (const NumericError &e) {
      CHECK(std::string(e.what()).find("log") != std::string::npos);
    }
  }

  SUBCASE("gradients") {
    std::mt19937_64 rng(11);
    CHECK(check_unary(random_tensor({3, 4}, rng), relu).passed());
    CHECK(check_unary(random_tensor({3, 4}, rng), sigmoid).passed());
    CHECK(check_unary(random_tensor({3, 4}, rng), exp).passed());
    CHECK(check_unary(random_tensor({3, 4}, rng, 0.2, 2.0), log).passed());
    CHECK(check_unary(random_tensor({3, 4}, rng, 0.2, 2.0), sqrt).passed());
    CHECK(check_unary(random_tensor({3, 4}, rng), softmax).passed());
    CHECK(check_unary(random_tensor({3, 4}, rng), sum_last).passed());
    CHECK(check_unary(random_tensor({3, 4}, rng), l2_norm_sq).passed());
    CHECK(check_unary(random_tensor({3, 4}, rng), transpose).passed());

    Tensor a = leaf(random_tensor({2, 3, 2, 4}, rng));
    Tensor b = leaf(random_tensor({2, 1, 1, 4}, rng));
    Tensor s = leaf(random_tensor({2, 3, 2, 1}, rng));
    Tensor d = leaf(random_tensor({2, 3, 2, 4}, rng, 0.5, 1.5));
    auto rep = grad_check(
        [&] {
          return project(div(sub(add(mul(s, b), a), b), d), 12);
        },
        {{"a", a}, {"b", b}, {"s", s}, {"d", d}});
    CHECK(rep.passed());

    Tensor u = leaf(random_tensor({3, 2, 1}, rng));
    rep = grad_check([&] { return project(upsample_nearest(u, 5, 3), 13); },
                     {{"u", u}});
    CHECK(rep.passed());

    Tensor p = leaf(random_tensor({3, 4}, rng));
    std::vector<std::size_t> idx{1, 3, 0};
    rep = grad_check([&] { return project(pick(p, idx), 14); }, {{"p", p}});
    CHECK(rep.passed());

    Tensor v = leaf(random_tensor({3, 4}, rng));
    Tensor w = leaf(random_tensor({3, 4}, rng));
    rep = grad_check([&] { return project(dot(v, w), 15); },
                     {{"v", v}, {"w", w}});
    CHECK(rep.passed());
  }
}

TEST_CASE("batchnorm") {
  std::mt19937_64 rng(16);
  BatchNorm bn(3);
  std::uniform_real_distribution<double> u(0.5, 1.5);
  for (auto &g : bn.gamma.data())
    g = u(rng);
  for (auto &b : bn.beta.data())
    b = u(rng) - 1.0;
  bn.gamma.set_requires_grad(true);
  bn.beta.set_requires_grad(true);
  Tensor x = leaf(random_tensor({5, 3}, rng));

  SUBCASE("training statistics") {
    BatchNorm plain(3);
    Tensor y = batchnorm(x, plain, true);
    for (std::size_t j = 0; j < 3; ++j) {
      double m = 0, v = 0;
      for (std::size_t r = 0; r < 5; ++r)
        m += y[r * 3 + j] / 5;
      for (std::size_t r = 0; r < 5; ++r)
        v += (y[r * 3 + j] - m) * (y[r * 3 + j] - m) / 5;
      CHECK(m == doctest::Approx(0.0).epsilon(1e-12));
      CHECK(v == doctest::Approx(1.0).epsilon(1e-4));
    }
    CHECK(plain.running_mean[0] != 0.0);
  }
  SUBCASE("training gradient") {
    auto rep = grad_check([&] { return project(batchnorm(x, bn, true), 17); },
                          {{"x", x}, {"gamma", bn.gamma}, {"beta", bn.beta}});
    CHECK(rep.passed());
  }
  SUBCASE("eval gradient and stability") {
    auto rep = grad_check([&] { return project(batchnorm(x, bn, false), 18); },
                          {{"x", x}, {"gamma", bn.gamma}, {"beta", bn.beta}});
    CHECK(rep.passed());
    CHECK(bit_equal(batchnorm(x, bn, false), batchnorm(x, bn, false)));
  }
  SUBCASE("spatial input normalizes per channel") {
    BatchNorm plain(2);
    Tensor y = batchnorm(random_tensor({2, 3, 3, 2}, rng), plain, true);
    double m = 0;
    for (std::size_t p = 0; p < 18; ++p)
      m += y[p * 2];
    CHECK(m == doctest::Approx(0.0).epsilon(1e-12));
  }
}

TEST_CASE("grad_check report") {
  SUBCASE("sum of squares") {
    Tensor x = leaf(Tensor({2}, std::vector<double>{1, 2}));
    GradCheckOptions opt;
    opt.tol = 1e-8;
    auto rep = grad_check([&] { return sum(mul(x, x)); }, {{"x", x}}, opt);
    REQUIRE(rep.entries.size() == 2);
    CHECK(rep.entries[0].analytic == 2.0);
    CHECK(rep.entries[1].analytic == 4.0);
    CHECK(rep.passed());
  }
  SUBCASE("constant function") {
    Tensor x = leaf(Tensor({3}, 0.7));
    auto rep = grad_check([&] { return Tensor::scalar(5.0); }, {{"x", x}});
    for (const auto &e : rep.entries) {
      CHECK(e.analytic == 0.0);
      CHECK(std::abs(e.numeric) < 1e-6);
    }
  }
  SUBCASE("a wrong gradient is reported") {
    // relu's kink at 0 makes the one-sided analytic value disagree with the
    // symmetric difference.
    Tensor x = leaf(Tensor({1}, 0.0));
    auto rep = grad_check([&] { return sum(relu(x)); }, {{"x", x}});
    CHECK_FALSE(rep.passed());
    CHECK(rep.failures().size() == 1);
  }
}

TEST_CASE("tape properties") {
  std::mt19937_64 rng(19);
  Tensor a = leaf(random_tensor({3, 4}, rng));
  Tensor b = leaf(random_tensor({4, 2}, rng));
  Tensor unused = leaf(random_tensor({2}, rng));

  SUBCASE("order and untouched leaves") {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = sum(sigmoid(matmul(a, b)));
    CHECK(tape.topologically_ordered());
    CHECK(tape.op_name(0) == "matmul");
    tape.backward(loss);
    for (double g : unused.grad())
      CHECK(g == 0.0);
  }

  SUBCASE("linearity of backward") {
    auto f1 = [&] { return sum(sigmoid(matmul(a, b))); };
    auto f2 = [&] { return sum(mul(matmul(a, b), matmul(a, b))); };
    {
      Tape tape;
      TapeScope scope(tape);
      tape.backward(f1());
    }
    std::vector<double> g1(a.grad().begin(), a.grad().end());
    a.zero_grad();
    b.zero_grad();
    {
      Tape tape;
      TapeScope scope(tape);
      tape.backward(f2());
    }
    std::vector<double> g2(a.grad().begin(), a.grad().end());
    a.zero_grad();
    b.zero_grad();
    {
      Tape tape;
      TapeScope scope(tape);
      tape.backward(add(f1(), f2()));
    }
    for (std::size_t i = 0; i < a.numel(); ++i)
      CHECK(std::abs(a.grad()[i] - (g1[i] + g2[i])) < 1e-12);
  }

  SUBCASE("determinism") {
    auto run = [&] {
      a.zero_grad();
      b.zero_grad();
      Tape tape;
      TapeScope scope(tape);
      Tensor y = softmax(matmul(a, b));
      tape.backward(sum(mul(y, y)));
      return std::make_pair(y.clone(), Tensor(a.shape(), std::vector<double>(
                                                             a.grad().begin(),
                                                             a.grad().end())));
    };
    auto r1 = run();
    auto r2 = run();
    CHECK(bit_equal(r1.first, r2.first));
    CHECK(bit_equal(r1.second, r2.second));
  }

  SUBCASE("no recording outside a scope") {
    Tensor y = matmul(a, b);
    CHECK_FALSE(y.requires_grad());
  }
}

TEST_CASE("softmax properties on random logits") {
  std::mt19937_64 rng(20);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor y = softmax(random_tensor({7}, rng, -30.0, 30.0));
    double s = 0.0;
    for (double v : y.data()) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("DTN1 serialization") {
  std::mt19937_64 rng(21);
  Tensor t = random_tensor({2, 3, 4}, rng);
  std::stringstream ss;
  write_tensor(ss, t);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "DTN1");
  CHECK(bytes.size() == 4 + 4 + 3 * 4 + 24 * 8);
  CHECK(bit_equal(read_tensor(ss), t));

  std::stringstream bad(std::string("XTN1") + bytes.substr(4));
  CHECK_THROWS_AS(read_tensor(bad), FormatError);
  std::stringstream cut(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(read_tensor(cut), FormatError);
}
