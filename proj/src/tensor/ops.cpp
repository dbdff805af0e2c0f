// SPDX-License-Identifier: Apache-2.0
#include "daam/ops.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace daam {

namespace {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrixMap = Eigen::Map<RowMatrix>;
using ConstRowMatrix = Eigen::Map<const RowMatrix>;

bool tracking(std::initializer_list<const Tensor *> inputs) {
  if (Tape::active() == nullptr)
    return false;
  for (const Tensor *t : inputs)
    if (t->requires_grad())
      return true;
  return false;
}

Tensor finish(std::string_view op, Tensor out, bool track) {
  for (double v : out.data())
    if (!std::isfinite(v))
      throw NumericError(std::string(op) + ": non-finite value in output");
  if (track)
    out.set_requires_grad(true);
  return out;
}

void record(std::string_view op, std::vector<Tensor> inputs, Tensor out,
            Tape::Rule rule) {
  Tape::active()->record(op, std::move(inputs), std::move(out),
                         std::move(rule));
}

// Numpy-style broadcasting of two shapes, aligned at the trailing axis.
struct Broadcast {
  Shape out;
  bool same = false;
  std::vector<std::size_t> ia, ib;
};

Broadcast make_broadcast(const Shape &a, const Shape &b, std::string_view op) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  bc.out.assign(rank, 1);
  Shape ea(rank, 1), eb(rank, 1);
  std::copy(a.begin(), a.end(), ea.begin() + (rank - a.size()));
  std::copy(b.begin(), b.end(), eb.begin() + (rank - b.size()));
  for (std::size_t d = 0; d < rank; ++d) {
    if (ea[d] != eb[d] && ea[d] != 1 && eb[d] != 1)
      throw DimensionError(std::string(op) + ": cannot broadcast " +
                           shape_str(a) + " with " + shape_str(b));
    bc.out[d] = std::max(ea[d], eb[d]);
  }
  // strides with zero on broadcast axes
  std::vector<std::size_t> sa(rank, 0), sb(rank, 0);
  std::size_t acca = 1, accb = 1;
  for (std::size_t d = rank; d-- > 0;) {
    sa[d] = ea[d] == 1 ? 0 : acca;
    sb[d] = eb[d] == 1 ? 0 : accb;
    acca *= ea[d];
    accb *= eb[d];
  }
  const std::size_t n = shape_numel(bc.out);
  bc.ia.resize(n);
  bc.ib.resize(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t i = 0; i < n; ++i) {
    bc.ia[i] = oa;
    bc.ib[i] = ob;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < bc.out[d])
        break;
      oa -= sa[d] * idx[d];
      ob -= sb[d] * idx[d];
      idx[d] = 0;
    }
  }
  return bc;
}

// f(a, b) -> value; da(a, b, g) and db(a, b, g) -> local gradient terms.
template <typename F, typename DA, typename DB>
Tensor binary(std::string_view op, const Tensor &a, const Tensor &b, F f,
              DA da, DB db) {
  auto bc = make_broadcast(a.shape(), b.shape(), op);
  Tensor out(bc.out);
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  if (bc.same) {
    for (std::size_t i = 0; i < o.size(); ++i)
      o[i] = f(x[i], y[i]);
  } else {
    for (std::size_t i = 0; i < o.size(); ++i)
      o[i] = f(x[bc.ia[i]], y[bc.ib[i]]);
  }
  const bool track = tracking({&a, &b});
  out = finish(op, std::move(out), track);
  if (track) {
    record(op, {a, b}, out,
           [a, b, out, bc = std::move(bc), da, db]() mutable {
             auto g = out.grad();
             auto x = a.data();
             auto y = b.data();
             const bool ga = a.requires_grad(), gb = b.requires_grad();
             for (std::size_t i = 0; i < g.size(); ++i) {
               const std::size_t i_a = bc.same ? i : bc.ia[i];
               const std::size_t i_b = bc.same ? i : bc.ib[i];
               if (ga)
                 a.grad()[i_a] += da(x[i_a], y[i_b], g[i]);
               if (gb)
                 b.grad()[i_b] += db(x[i_a], y[i_b], g[i]);
             }
           });
  }
  return out;
}

// f(x) -> y; df(x, y) -> dy/dx.
template <typename F, typename DF>
Tensor unary(std::string_view op, const Tensor &a, F f, DF df) {
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i)
    o[i] = f(x[i]);
  const bool track = tracking({&a});
  out = finish(op, std::move(out), track);
  if (track) {
    record(op, {a}, out, [a, out, df]() mutable {
      auto g = out.grad();
      auto x = a.data();
      auto y = out.data();
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        ga[i] += g[i] * df(x[i], y[i]);
    });
  }
  return out;
}

void require_rank(std::string_view op, const Tensor &t,
                  std::initializer_list<std::size_t> ranks) {
  for (auto r : ranks)
    if (t.rank() == r)
      return;
  throw DimensionError(std::string(op) + ": unsupported rank for shape " +
                       shape_str(t.shape()));
}

// Views [h,w,c] as a batch of one.
struct Spatial {
  std::size_t n, h, w, c;
  bool batched;
};

Spatial spatial_dims(std::string_view op, const Tensor &t) {
  require_rank(op, t, {3, 4});
  const auto &s = t.shape();
  if (s.size() == 3)
    return {1, s[0], s[1], s[2], false};
  return {s[0], s[1], s[2], s[3], true};
}

Shape spatial_shape(const Spatial &d, std::size_t h, std::size_t w,
                    std::size_t c) {
  if (d.batched)
    return {d.n, h, w, c};
  return {h, w, c};
}

} // namespace

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor &a, const Tensor &b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = x[i * k + p];
      if (av == 0.0)
        continue;
      const double *brow = &y[p * n];
      double *orow = &o[i * n];
      for (std::size_t j = 0; j < n; ++j)
        orow[j] += av * brow[j];
    }
  const bool track = tracking({&a, &b});
  out = finish("matmul", std::move(out), track);
  if (track) {
    record("matmul", {a, b}, out, [a, b, out, m, k, n]() mutable {
      auto g = out.grad();
      auto x = a.data();
      auto y = b.data();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j)
              acc += g[i * n + j] * y[p * n + j];
            ga[i * k + p] += acc;
          }
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double av = x[i * k + p];
            for (std::size_t j = 0; j < n; ++j)
              gb[p * n + j] += av * g[i * n + j];
          }
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor &a) {
  if (a.rank() != 2)
    throw DimensionError("transpose: expected rank 2, got " +
                         shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out[j * m + i] = a[i * n + j];
  const bool track = tracking({&a});
  out = finish("transpose", std::move(out), track);
  if (track) {
    record("transpose", {a}, out, [a, out, m, n]() mutable {
      auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
          ga[i * n + j] += g[j * m + i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------

Tensor add(const Tensor &a, const Tensor &b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double g) { return g; },
      [](double, double, double g) { return g; });
}

Tensor sub(const Tensor &a, const Tensor &b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double g) { return g; },
      [](double, double, double g) { return -g; });
}

Tensor mul(const Tensor &a, const Tensor &b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double g) { return g * y; },
      [](double x, double, double g) { return g * x; });
}

Tensor div(const Tensor &a, const Tensor &b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double g) { return g / y; },
      [](double x, double y, double g) { return -g * x / (y * y); });
}

Tensor scale(const Tensor &a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

Tensor relu(const Tensor &a) {
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor &a) {
  return unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0.0)
          return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor &a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor &a) {
  return unary(
      "log", a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor &a) {
  return unary(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

Tensor clamp(const Tensor &a, double lo, double hi) {
  return unary(
      "clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------

Tensor reshape(const Tensor &a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) +
                         " as " + shape_str(shape));
  Tensor out(std::move(shape),
             std::vector<double>(a.data().begin(), a.data().end()));
  const bool track = tracking({&a});
  out = finish("reshape", std::move(out), track);
  if (track) {
    record("reshape", {a}, out, [a, out]() mutable {
      auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        ga[i] += g[i];
    });
  }
  return out;
}

Tensor sum(const Tensor &a) {
  double acc = 0.0;
  for (double v : a.data())
    acc += v;
  Tensor out = Tensor::scalar(acc);
  const bool track = tracking({&a});
  out = finish("sum", std::move(out), track);
  if (track) {
    record("sum", {a}, out, [a, out]() mutable {
      const double g = out.grad()[0];
      for (auto &v : a.grad())
        v += g;
    });
  }
  return out;
}

Tensor mean(const Tensor &a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_last(const Tensor &a) {
  if (a.rank() == 0)
    throw DimensionError("sum_last: scalar input");
  const std::size_t k = a.shape().back();
  const std::size_t rows = a.numel() / k;
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  Tensor out(shape);
  auto x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < k; ++j)
      acc += x[r * k + j];
    out[r] = acc;
  }
  const bool track = tracking({&a});
  out = finish("sum_last", std::move(out), track);
  if (track) {
    record("sum_last", {a}, out, [a, out, k, rows]() mutable {
      auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < k; ++j)
          ga[r * k + j] += g[r];
    });
  }
  return out;
}

Tensor dot(const Tensor &u, const Tensor &v) {
  if (u.shape() != v.shape())
    throw DimensionError("dot: shape mismatch " + shape_str(u.shape()) +
                         " vs " + shape_str(v.shape()));
  return sum_last(mul(u, v));
}

Tensor l2_norm_sq(const Tensor &v) { return sum_last(mul(v, v)); }

Tensor softmax(const Tensor &logits) {
  if (logits.rank() == 0)
    throw DimensionError("softmax: scalar input");
  for (double v : logits.data())
    if (!std::isfinite(v))
      throw NumericError("softmax: non-finite logit");
  const std::size_t k = logits.shape().back();
  const std::size_t rows = logits.numel() / k;
  Tensor out(logits.shape());
  auto x = logits.data();
  auto y = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double *xr = &x[r * k];
    double *yr = &y[r * k];
    const double mx = *std::max_element(xr, xr + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      z += yr[j];
    }
    for (std::size_t j = 0; j < k; ++j)
      yr[j] /= z;
  }
  const bool track = tracking({&logits});
  out = finish("softmax", std::move(out), track);
  if (track) {
    record("softmax", {logits}, out, [logits, out, k, rows]() mutable {
      auto g = out.grad();
      auto y = out.data();
      auto gx = logits.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j)
          s += g[r * k + j] * y[r * k + j];
        for (std::size_t j = 0; j < k; ++j)
          gx[r * k + j] += y[r * k + j] * (g[r * k + j] - s);
      }
    });
  }
  return out;
}

Tensor pick(const Tensor &a, std::span<const std::size_t> index) {
  if (a.rank() != 2 || a.dim(0) != index.size())
    throw DimensionError("pick: shape " + shape_str(a.shape()) + " with " +
                         std::to_string(index.size()) + " indices");
  const std::size_t n = a.dim(0), k = a.dim(1);
  std::vector<std::size_t> idx(index.begin(), index.end());
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    if (idx[i] >= k)
      throw DimensionError("pick: index " + std::to_string(idx[i]) +
                           " out of range for " + std::to_string(k) +
                           " columns");
    out[i] = a[i * k + idx[i]];
  }
  const bool track = tracking({&a});
  out = finish("pick", std::move(out), track);
  if (track) {
    record("pick", {a}, out, [a, out, idx = std::move(idx), k]() mutable {
      auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < idx.size(); ++i)
        ga[i * k + idx[i]] += g[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor &input, const Tensor &kernel, std::size_t stride,
              std::size_t padding) {
  const auto d = spatial_dims("conv2d", input);
  if (kernel.rank() != 4 || kernel.dim(2) != d.c)
    throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) +
                         " incompatible with input " +
                         shape_str(input.shape()));
  if (stride == 0)
    throw DimensionError("conv2d: stride must be positive");
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1),
                    co = kernel.dim(3);
  if (kh > d.h + 2 * padding || kw > d.w + 2 * padding)
    throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) +
                         " larger than padded input " +
                         shape_str(input.shape()));
  const std::size_t oh = (d.h + 2 * padding - kh) / stride + 1;
  const std::size_t ow = (d.w + 2 * padding - kw) / stride + 1;
  const std::size_t ci = d.c;
  const std::size_t rows = d.n * oh * ow, depth = kh * kw * ci;

  // Row p of `cols` holds the receptive field of output pixel p in kernel
  // order (ky, kx, c); padded taps stay zero. With the kernel viewed as a
  // [kh*kw*ci, co] matrix the convolution is a single product.
  auto for_each_tap = [=](auto &&fn) {
    for (std::size_t n = 0; n < d.n; ++n)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const std::size_t row = (n * oh + oy) * ow + ox;
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const long iy = static_cast<long>(oy * stride + ky) -
                            static_cast<long>(padding);
            if (iy < 0 || iy >= static_cast<long>(d.h))
              continue;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const long ix = static_cast<long>(ox * stride + kx) -
                              static_cast<long>(padding);
              if (ix < 0 || ix >= static_cast<long>(d.w))
                continue;
              const std::size_t ibase =
                  ((n * d.h + static_cast<std::size_t>(iy)) * d.w +
                   static_cast<std::size_t>(ix)) *
                  ci;
              fn(ibase, row * depth + (ky * kw + kx) * ci);
            }
          }
        }
  };

  auto x = input.data();
  auto cols = std::make_shared<std::vector<double>>(rows * depth, 0.0);
  for_each_tap([&](std::size_t ib, std::size_t cb) {
    std::copy_n(x.begin() + static_cast<long>(ib), ci,
                cols->begin() + static_cast<long>(cb));
  });

  Tensor out(spatial_shape(d, oh, ow, co));
  ConstRowMatrix col_m(cols->data(), static_cast<Eigen::Index>(rows),
                       static_cast<Eigen::Index>(depth));
  ConstRowMatrix ker_m(kernel.data().data(), static_cast<Eigen::Index>(depth),
                       static_cast<Eigen::Index>(co));
  RowMatrixMap(out.data().data(), static_cast<Eigen::Index>(rows),
               static_cast<Eigen::Index>(co))
      .noalias() = col_m * ker_m;

  const bool track = tracking({&input, &kernel});
  out = finish("conv2d", std::move(out), track);
  if (track) {
    record("conv2d", {input, kernel}, out,
           [input, kernel, out, cols, for_each_tap, rows, depth, ci,
            co]() mutable {
             const auto R = static_cast<Eigen::Index>(rows);
             const auto K = static_cast<Eigen::Index>(depth);
             const auto C = static_cast<Eigen::Index>(co);
             ConstRowMatrix g(out.grad().data(), R, C);
             ConstRowMatrix col_m(cols->data(), R, K);
             if (kernel.requires_grad())
               RowMatrixMap(kernel.grad().data(), K, C).noalias() +=
                   col_m.transpose() * g;
             if (input.requires_grad()) {
               std::vector<double> gcols(rows * depth);
               ConstRowMatrix ker_m(kernel.data().data(), K, C);
               RowMatrixMap(gcols.data(), R, K).noalias() =
                   g * ker_m.transpose();
               auto gi = input.grad();
               for_each_tap([&](std::size_t ib, std::size_t cb) {
                 for (std::size_t c = 0; c < ci; ++c)
                   gi[ib + c] += gcols[cb + c];
               });
             }
           });
  }
  return out;
}

Tensor global_avg_pool_spatial(const Tensor &input) {
  const auto d = spatial_dims("global_avg_pool_spatial", input);
  const std::size_t hw = d.h * d.w;
  const double inv = 1.0 / static_cast<double>(hw);
  Tensor out(d.batched ? Shape{d.n, d.c} : Shape{d.c});
  auto x = input.data();
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t c = 0; c < d.c; ++c)
        out[n * d.c + c] += x[(n * hw + p) * d.c + c];
  for (auto &v : out.data())
    v *= inv;
  const bool track = tracking({&input});
  out = finish("global_avg_pool_spatial", std::move(out), track);
  if (track) {
    record("global_avg_pool_spatial", {input}, out,
           [input, out, d, hw, inv]() mutable {
             auto g = out.grad();
             auto gx = input.grad();
             for (std::size_t n = 0; n < d.n; ++n)
               for (std::size_t p = 0; p < hw; ++p)
                 for (std::size_t c = 0; c < d.c; ++c)
                   gx[(n * hw + p) * d.c + c] += inv * g[n * d.c + c];
           });
  }
  return out;
}

Tensor avg_pool_channels(const Tensor &input) {
  if (input.rank() == 0)
    throw DimensionError("avg_pool_channels: scalar input");
  const std::size_t c = input.shape().back();
  const std::size_t px = input.numel() / c;
  const double inv = 1.0 / static_cast<double>(c);
  Shape shape = input.shape();
  shape.back() = 1;
  Tensor out(shape);
  auto x = input.data();
  for (std::size_t p = 0; p < px; ++p) {
    double acc = 0.0;
    for (std::size_t j = 0; j < c; ++j)
      acc += x[p * c + j];
    out[p] = acc * inv;
  }
  const bool track = tracking({&input});
  out = finish("avg_pool_channels", std::move(out), track);
  if (track) {
    record("avg_pool_channels", {input}, out, [input, out, c, px, inv]() mutable {
      auto g = out.grad();
      auto gx = input.grad();
      for (std::size_t p = 0; p < px; ++p)
        for (std::size_t j = 0; j < c; ++j)
          gx[p * c + j] += inv * g[p];
    });
  }
  return out;
}

Tensor upsample_nearest(const Tensor &input, std::size_t target_h,
                        std::size_t target_w) {
  const auto d = spatial_dims("upsample_nearest", input);
  if (target_h == 0 || target_w == 0)
    throw DimensionError("upsample_nearest: zero target extent");
  std::vector<std::size_t> src(target_h * target_w);
  for (std::size_t y = 0; y < target_h; ++y)
    for (std::size_t x = 0; x < target_w; ++x)
      src[y * target_w + x] = (y * d.h / target_h) * d.w + (x * d.w / target_w);
  Tensor out(spatial_shape(d, target_h, target_w, d.c));
  auto xin = input.data();
  const std::size_t in_px = d.h * d.w, out_px = target_h * target_w;
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t p = 0; p < out_px; ++p)
      for (std::size_t c = 0; c < d.c; ++c)
        out[(n * out_px + p) * d.c + c] =
            xin[(n * in_px + src[p]) * d.c + c];
  const bool track = tracking({&input});
  out = finish("upsample_nearest", std::move(out), track);
  if (track) {
    record("upsample_nearest", {input}, out,
           [input, out, d, src = std::move(src), in_px, out_px]() mutable {
             auto g = out.grad();
             auto gx = input.grad();
             for (std::size_t n = 0; n < d.n; ++n)
               for (std::size_t p = 0; p < out_px; ++p)
                 for (std::size_t c = 0; c < d.c; ++c)
                   gx[(n * in_px + src[p]) * d.c + c] +=
                       g[(n * out_px + p) * d.c + c];
           });
  }
  return out;
}

// ---------------------------------------------------------------------------

BatchNorm::BatchNorm(std::size_t features)
    : gamma(Shape{features}, 1.0), beta(Shape{features}, 0.0),
      running_mean(features, 0.0), running_var(features, 1.0) {}

Tensor batchnorm(const Tensor &x, BatchNorm &bn, bool training) {
  const std::size_t f = bn.features();
  if (x.rank() == 0 || x.shape().back() != f || bn.gamma.numel() != f ||
      bn.beta.numel() != f)
    throw DimensionError("batchnorm: input " + shape_str(x.shape()) +
                         " does not match " + std::to_string(f) + " features");
  const std::size_t m = x.numel() / f;
  auto xv = x.data();
  std::vector<double> mu(f, 0.0), inv_std(f, 0.0);
  if (training) {
    std::vector<double> var(f, 0.0);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t j = 0; j < f; ++j)
        mu[j] += xv[r * f + j];
    for (auto &v : mu)
      v /= static_cast<double>(m);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t j = 0; j < f; ++j) {
        const double dlt = xv[r * f + j] - mu[j];
        var[j] += dlt * dlt;
      }
    for (std::size_t j = 0; j < f; ++j) {
      var[j] /= static_cast<double>(m);
      inv_std[j] = 1.0 / std::sqrt(var[j] + bn.eps);
      const double unbiased =
          m > 1 ? var[j] * static_cast<double>(m) / static_cast<double>(m - 1)
                : var[j];
      bn.running_mean[j] =
          (1.0 - bn.momentum) * bn.running_mean[j] + bn.momentum * mu[j];
      bn.running_var[j] =
          (1.0 - bn.momentum) * bn.running_var[j] + bn.momentum * unbiased;
    }
  } else {
    for (std::size_t j = 0; j < f; ++j) {
      mu[j] = bn.running_mean[j];
      inv_std[j] = 1.0 / std::sqrt(bn.running_var[j] + bn.eps);
    }
  }

  Tensor xhat(x.shape());
  Tensor out(x.shape());
  auto gam = bn.gamma.data();
  auto bet = bn.beta.data();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t j = 0; j < f; ++j) {
      const double h = (xv[r * f + j] - mu[j]) * inv_std[j];
      xhat[r * f + j] = h;
      out[r * f + j] = gam[j] * h + bet[j];
    }

  Tensor gamma = bn.gamma, beta = bn.beta;
  const bool track = tracking({&x, &gamma, &beta});
  out = finish("batchnorm", std::move(out), track);
  if (track) {
    record("batchnorm", {x, gamma, beta}, out,
           [x, gamma, beta, out, xhat, inv_std = std::move(inv_std), m, f,
            training]() mutable {
             auto g = out.grad();
             auto gam = gamma.data();
             auto h = xhat.data();
             std::vector<double> sum_g(f, 0.0), sum_gh(f, 0.0);
             for (std::size_t r = 0; r < m; ++r)
               for (std::size_t j = 0; j < f; ++j) {
                 sum_g[j] += g[r * f + j];
                 sum_gh[j] += g[r * f + j] * h[r * f + j];
               }
             if (gamma.requires_grad()) {
               auto gg = gamma.grad();
               for (std::size_t j = 0; j < f; ++j)
                 gg[j] += sum_gh[j];
             }
             if (beta.requires_grad()) {
               auto gb = beta.grad();
               for (std::size_t j = 0; j < f; ++j)
                 gb[j] += sum_g[j];
             }
             if (x.requires_grad()) {
               auto gx = x.grad();
               const double inv_m = 1.0 / static_cast<double>(m);
               for (std::size_t r = 0; r < m; ++r)
                 for (std::size_t j = 0; j < f; ++j) {
                   const double k = gam[j] * inv_std[j];
                   double v = g[r * f + j];
                   if (training)
                     v -= inv_m * (sum_g[j] + h[r * f + j] * sum_gh[j]);
                   gx[r * f + j] += k * v;
                 }
             }
           });
  }
  return out;
}

} // namespace daam
