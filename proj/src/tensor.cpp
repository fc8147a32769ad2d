#include "moescope/tensor.hpp"

#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>

namespace moescope::nd {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

static void check_shape(const Shape& shape) {
  for (auto d : shape) {
    if (d <= 0) throw ShapeError("tensor dimension must be positive, got " + shape_str(shape));
  }
}

Tensor::Tensor(Shape shape, double fill, bool requires_grad)
    : d_(std::make_shared<detail::TensorData>()) {
  check_shape(shape);
  d_->shape = std::move(shape);
  d_->value.assign(static_cast<std::size_t>(shape_numel(d_->shape)), fill);
  d_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : d_(std::make_shared<detail::TensorData>()) {
  check_shape(shape);
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw ShapeError("data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  d_->shape = std::move(shape);
  d_->value = std::move(data);
  d_->requires_grad = requires_grad;
}

Tensor Tensor::randn(Shape shape, SequentialRng& rng, double stddev, bool requires_grad) {
  Tensor t(std::move(shape), 0.0, requires_grad);
  for (auto& v : t.d_->value) v = stddev * rng.normal();
  return t;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item() requires a single-element tensor, shape is " + shape_str(shape()));
  }
  return d_->value[0];
}

std::vector<double>& Tensor::grad() {
  if (d_->grad.empty()) d_->grad.assign(d_->value.size(), 0.0);
  return d_->grad;
}

const std::vector<double>& Tensor::grad_const() const {
  if (d_->grad.empty()) {
    throw ValidationError("tensor has no gradient; run backward() first");
  }
  return d_->grad;
}

void Tensor::zero_grad() {
  if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  Tensor t;
  t.d_->shape = d_->shape;
  t.d_->value = d_->value;
  t.d_->requires_grad = d_->requires_grad;
  return t;
}

void accumulate_grad(Tensor& t, std::span<const double> g) {
  auto& acc = t.grad();
  if (acc.size() != g.size()) {
    throw ShapeError("gradient size mismatch: " + std::to_string(acc.size()) + " vs " +
                     std::to_string(g.size()));
  }
  parallel_2(static_cast<std::int64_t>(g.size()), 65536, [&](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t i = i0; i < i1; ++i) acc[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)];
  });
}

void Tape::backward(Tensor& scalar_output) {
  if (scalar_output.numel() != 1) {
    throw ValidationError("backward() requires a scalar output, shape is " +
                          shape_str(scalar_output.shape()));
  }
  scalar_output.grad()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

// --- NDT1 ---------------------------------------------------------------

static_assert(sizeof(double) == 8);

namespace {
template <typename T>
void write_raw(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T read_raw(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ValidationError("NDT1: truncated stream");
  return v;
}
}  // namespace

void write_ndt1(std::ostream& os, const Tensor& t) {
  os.write("NDT1", 4);
  const auto rank = static_cast<std::uint8_t>(t.rank());
  write_raw(os, rank);
  for (auto d : t.shape()) write_raw(os, static_cast<std::uint64_t>(d));
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

Tensor read_ndt1(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "NDT1", 4) != 0) {
    throw ValidationError("NDT1: bad magic");
  }
  const auto rank = read_raw<std::uint8_t>(is);
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<std::int64_t>(read_raw<std::uint64_t>(is));
  const auto n = shape_numel(shape);
  std::vector<double> data(static_cast<std::size_t>(n));
  is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!is) throw ValidationError("NDT1: truncated payload");
  return Tensor(std::move(shape), std::move(data));
}

std::string hex64_impl(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

}  // namespace moescope::nd

namespace moescope {
std::string hex64(std::uint64_t v) { return nd::hex64_impl(v); }
}  // namespace moescope
