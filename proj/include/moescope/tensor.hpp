#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "moescope/common.hpp"
#include "moescope/rng.hpp"

namespace moescope::nd {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorData {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on first accumulation
  bool requires_grad = false;
};
}  // namespace detail

// Dense N-d array of 64-bit reals, row-major, value-semantic handle over
// shared storage. Values are treated as immutable once an op has consumed
// the tensor; only the grad accumulator mutates afterwards.
class Tensor {
 public:
  Tensor() : d_(std::make_shared<detail::TensorData>()) {}
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), 0.0, requires_grad);
  }
  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    return Tensor(std::move(shape), v, requires_grad);
  }
  static Tensor from_vector(std::vector<double> v, bool requires_grad = false) {
    Shape s{static_cast<std::int64_t>(v.size())};
    return Tensor(std::move(s), std::move(v), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<double>{v}, requires_grad);
  }
  static Tensor randn(Shape shape, SequentialRng& rng, double stddev = 1.0,
                      bool requires_grad = false);

  const Shape& shape() const { return d_->shape; }
  std::int64_t dim(std::size_t axis) const { return d_->shape.at(axis); }
  std::size_t rank() const { return d_->shape.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(d_->value.size()); }

  double* data() { return d_->value.data(); }
  const double* data() const { return d_->value.data(); }
  std::span<const double> values() const { return d_->value; }
  std::vector<double>& vec() { return d_->value; }
  const std::vector<double>& vec() const { return d_->value; }

  double item() const;

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool rg) { d_->requires_grad = rg; }

  bool has_grad() const { return !d_->grad.empty(); }
  // Grad accumulator, zero-allocated on demand; same shape as data.
  std::vector<double>& grad();
  const std::vector<double>& grad_const() const;
  void zero_grad();

  bool same_storage(const Tensor& other) const { return d_ == other.d_; }

  // Deep copy; detaches from any graph, drops grad.
  Tensor clone() const;

 private:
  std::shared_ptr<detail::TensorData> d_;
};

// Records primitive applications during a forward pass. backward() replays
// the local gradient rules in reverse recording order, which is a valid
// topological order by construction and visits every node exactly once.
class Tape {
 public:
  void record(std::function<void()> backfn) { nodes_.push_back(std::move(backfn)); }
  std::size_t node_count() const { return nodes_.size(); }

  // Seeds d(out)/d(out) = 1 and accumulates grads into every recorded
  // ancestor. Throws if `scalar_output` is not a single-element tensor.
  void backward(Tensor& scalar_output);

  void clear() { nodes_.clear(); }

 private:
  std::vector<std::function<void()>> nodes_;
};

// Accumulates grad into t, allocating a zero buffer on first touch.
void accumulate_grad(Tensor& t, std::span<const double> g);

// --- NDT1 serialization -----------------------------------------------
// Little-endian: magic "NDT1", u8 rank, u64 dims[rank], f64 payload
// row-major. A tensor round-trips bit-exactly.
void write_ndt1(std::ostream& os, const Tensor& t);
Tensor read_ndt1(std::istream& is);

}  // namespace moescope::nd
