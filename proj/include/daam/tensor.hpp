// SPDX-License-Identifier: Apache-2.0
/**
 * @file   tensor.hpp
 * @brief  Dense row-major tensor with an optional gradient buffer, and the
 *         tape that records operations for reverse-mode differentiation.
 *
 * A Tensor is a cheap handle onto shared storage. Copying a Tensor aliases
 * the same buffers (the tape and the optimizer rely on identity); use
 * clone() for an independent deep copy.
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace daam {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape &shape);
std::string shape_str(const Shape &shape);

/// Incompatible extents, ranks, or indices.
class DimensionError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// A NaN or infinity appeared in an intermediate result.
class NumericError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Malformed, truncated, or mismatched binary file.
class FormatError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::uint64_t serial = 0;
};
} // namespace detail

class Tensor {
public:
  /// Rank-0 scalar holding 0.
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);

  const Shape &shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t dim(std::size_t axis) const;

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  /// Gradient buffer. Writable through const handles so recorded backward
  /// rules can accumulate into captured inputs.
  std::span<double> grad() const;

  double operator[](std::size_t i) const { return impl_->data[i]; }
  double &operator[](std::size_t i) { return impl_->data[i]; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  /// Marks the tensor as a differentiable leaf and allocates a zeroed grad.
  Tensor &set_requires_grad(bool on);
  void zero_grad();

  /// Independent copy of shape and data; never requires grad.
  Tensor clone() const;

  bool same_storage(const Tensor &other) const { return impl_ == other.impl_; }
  std::uint64_t serial() const { return impl_->serial; }

private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Records differentiable operations in execution order. Backward replays the
/// recorded local-gradient rules in exact reverse order.
class Tape {
public:
  using Rule = std::function<void()>;

  void record(std::string_view op, std::vector<Tensor> inputs, Tensor output,
              Rule rule);

  /// Seeds d(loss)/d(loss) = 1 and propagates into every tracked input.
  /// Gradients accumulate; callers zero leaf grads between steps.
  void backward(Tensor loss);

  void reset() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }
  const std::string &op_name(std::size_t i) const { return entries_[i].op; }

  /// True iff every entry's inputs were created before its output.
  bool topologically_ordered() const;

  /// Tape that ops record onto, or nullptr outside any TapeScope.
  static Tape *active();

private:
  struct Entry {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    Rule rule;
  };
  std::vector<Entry> entries_;
};

/// Makes a tape active for the current thread for the scope's lifetime.
class TapeScope {
public:
  explicit TapeScope(Tape &tape);
  ~TapeScope();
  TapeScope(const TapeScope &) = delete;
  TapeScope &operator=(const TapeScope &) = delete;

private:
  Tape *previous_;
};

/// Suspends recording (e.g. for finite-difference probes) within a scope.
class NoGradScope {
public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope &) = delete;
  NoGradScope &operator=(const NoGradScope &) = delete;

private:
  Tape *previous_;
};

// DTN1 serialization: "DTN1", u32 rank, u32 extents, little-endian f64 data.
void write_tensor(std::ostream &out, const Tensor &t);
Tensor read_tensor(std::istream &in);

namespace io {
void write_u16(std::ostream &out, std::uint16_t v);
void write_u32(std::ostream &out, std::uint32_t v);
void write_u64(std::ostream &out, std::uint64_t v);
void write_f64(std::ostream &out, double v);
std::uint16_t read_u16(std::istream &in);
std::uint32_t read_u32(std::istream &in);
std::uint64_t read_u64(std::istream &in);
double read_f64(std::istream &in);
void write_magic(std::ostream &out, std::string_view magic);
/// Throws FormatError naming `what` when the next bytes differ from magic.
void expect_magic(std::istream &in, std::string_view magic,
                  std::string_view what);
} // namespace io

} // namespace daam
