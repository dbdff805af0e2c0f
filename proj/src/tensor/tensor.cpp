// SPDX-License-Identifier: Apache-2.0
#include "daam/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>

namespace daam {

namespace {

std::uint64_t next_serial() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

thread_local Tape *g_active_tape = nullptr;

} // namespace

std::size_t shape_numel(const Shape &shape) {
  std::size_t n = 1;
  for (auto e : shape)
    n *= e;
  return n;
}

std::string shape_str(const Shape &shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i)
      os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor() : Tensor(Shape{}, 0.0) {}

Tensor::Tensor(Shape shape, double fill)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  for (auto e : shape)
    if (e == 0)
      throw DimensionError("tensor extents must be positive, got " +
                           shape_str(shape));
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
  impl_->serial = next_serial();
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  for (auto e : shape)
    if (e == 0)
      throw DimensionError("tensor extents must be positive, got " +
                           shape_str(shape));
  if (values.size() != shape_numel(shape))
    throw DimensionError("tensor of shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  impl_->data = std::move(values);
  impl_->shape = std::move(shape);
  impl_->serial = next_serial();
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, value); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank())
    throw DimensionError("axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(shape()));
  return impl_->shape[axis];
}

std::span<double> Tensor::grad() const {
  if (!impl_->requires_grad)
    throw std::logic_error("grad requested on a tensor without requires_grad");
  return impl_->grad;
}

double Tensor::item() const {
  if (numel() != 1)
    throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

Tensor &Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  if (on)
    impl_->grad.assign(impl_->data.size(), 0.0);
  else
    impl_->grad.clear();
  return *this;
}

void Tensor::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::clone() const { return Tensor(impl_->shape, impl_->data); }

// ---------------------------------------------------------------------------

void Tape::record(std::string_view op, std::vector<Tensor> inputs,
                  Tensor output, Rule rule) {
  entries_.push_back(
      Entry{std::string(op), std::move(inputs), std::move(output),
            std::move(rule)});
}

void Tape::backward(Tensor loss) {
  if (loss.numel() != 1)
    throw DimensionError("backward needs a scalar loss, got shape " +
                         shape_str(loss.shape()));
  if (!loss.requires_grad())
    return;
  loss.grad()[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it)
    it->rule();
}

bool Tape::topologically_ordered() const {
  for (const auto &e : entries_)
    for (const auto &in : e.inputs)
      if (in.serial() >= e.output.serial())
        return false;
  return true;
}

Tape *Tape::active() { return g_active_tape; }

TapeScope::TapeScope(Tape &tape) : previous_(g_active_tape) {
  g_active_tape = &tape;
}
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) {
  g_active_tape = nullptr;
}
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

// ---------------------------------------------------------------------------

namespace io {

namespace {
template <typename T> void write_le(std::ostream &out, T v) {
  static_assert(std::endian::native == std::endian::little,
                "big-endian hosts are not supported");
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.write(buf, sizeof(T));
}

template <typename T> T read_le(std::istream &in) {
  char buf[sizeof(T)];
  if (!in.read(buf, sizeof(T)))
    throw FormatError("truncated payload");
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}
} // namespace

void write_u16(std::ostream &out, std::uint16_t v) { write_le(out, v); }
void write_u32(std::ostream &out, std::uint32_t v) { write_le(out, v); }
void write_u64(std::ostream &out, std::uint64_t v) { write_le(out, v); }
void write_f64(std::ostream &out, double v) { write_le(out, v); }
std::uint16_t read_u16(std::istream &in) { return read_le<std::uint16_t>(in); }
std::uint32_t read_u32(std::istream &in) { return read_le<std::uint32_t>(in); }
std::uint64_t read_u64(std::istream &in) { return read_le<std::uint64_t>(in); }
double read_f64(std::istream &in) { return read_le<double>(in); }

void write_magic(std::ostream &out, std::string_view magic) {
  out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

void expect_magic(std::istream &in, std::string_view magic,
                  std::string_view what) {
  std::string got(magic.size(), '\0');
  if (!in.read(got.data(), static_cast<std::streamsize>(got.size())))
    throw FormatError(std::string(what) + ": truncated before magic");
  if (got != magic)
    throw FormatError(std::string(what) + ": bad magic, expected \"" +
                      std::string(magic) + "\"");
}

} // namespace io

void write_tensor(std::ostream &out, const Tensor &t) {
  io::write_magic(out, "DTN1");
  io::write_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape())
    io::write_u32(out, static_cast<std::uint32_t>(e));
  for (double v : t.data())
    io::write_f64(out, v);
}

Tensor read_tensor(std::istream &in) {
  io::expect_magic(in, "DTN1", "tensor");
  const auto rank = io::read_u32(in);
  if (rank > 8)
    throw FormatError("tensor: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto &e : shape) {
    e = io::read_u32(in);
    if (e == 0)
      throw FormatError("tensor: zero extent");
  }
  std::vector<double> values(shape_numel(shape));
  for (auto &v : values)
    v = io::read_f64(in);
  return Tensor(std::move(shape), std::move(values));
}

} // namespace daam
