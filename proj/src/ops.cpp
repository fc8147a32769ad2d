#include "moescope/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <thread>

namespace moescope::nd {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

bool track(Tape* tape, std::initializer_list<const Tensor*> ins) {
  if (!tape) return false;
  for (const auto* t : ins) {
    if (t->requires_grad()) return true;
  }
  return false;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

using Eigen::MatrixXd;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<const RowMat>;
using MapRowMut = Eigen::Map<RowMat>;

// C = A * B with the column range split across two threads for wide B.
// Each output column is produced by exactly one thread with an unchanged
// accumulation order, so the result does not depend on the split.
void gemm_nn(const MatrixXd& a, const MatrixXd& b, MatrixXd& c) {
  const auto n = b.cols();
  c.resize(a.rows(), n);
  if (n >= 4096) {
    const auto mid = n / 2;
    parallel_2(2, 1, [&](std::int64_t i0, std::int64_t i1) {
      for (std::int64_t i = i0; i < i1; ++i) {
        if (i == 0) {
          c.leftCols(mid).noalias() = a * b.leftCols(mid);
        } else {
          c.rightCols(n - mid).noalias() = a * b.rightCols(n - mid);
        }
      }
    });
  } else {
    c.noalias() = a * b;
  }
}

// C = A * B^T, split across result columns (rows of B).
void gemm_nt(const MatrixXd& a, const MatrixXd& b, MatrixXd& c) {
  const auto n = b.rows();
  c.resize(a.rows(), n);
  if (a.cols() >= 4096 && n >= 2) {
    const auto mid = n / 2;
    parallel_2(2, 1, [&](std::int64_t i0, std::int64_t i1) {
      for (std::int64_t i = i0; i < i1; ++i) {
        if (i == 0) {
          c.leftCols(mid).noalias() = a * b.topRows(mid).transpose();
        } else {
          c.rightCols(n - mid).noalias() = a * b.bottomRows(n - mid).transpose();
        }
      }
    });
  } else {
    c.noalias() = a * b.transpose();
  }
}

Tensor unary_op(const Tensor& x, Tape* tape, double (*f)(double), double (*df)(double)) {
  Tensor out(x.shape());
  const double* xi = x.data();
  double* oi = out.data();
  const auto n = x.numel();
  parallel_2(n, 65536, [&](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t i = i0; i < i1; ++i) oi[i] = f(xi[i]);
  });
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    tape->record([xc, oc, df]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_const();
      auto& xg = xc.grad();
      const double* xv = xc.data();
      parallel_2(static_cast<std::int64_t>(g.size()), 65536, [&](std::int64_t i0, std::int64_t i1) {
        for (std::int64_t i = i0; i < i1; ++i) {
          xg[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)] * df(xv[i]);
        }
      });
    });
  }
  return out;
}

}  // namespace

// --- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
  check_same_shape(a, b, "add");
  Tensor out(a.shape());
  const auto n = a.numel();
  parallel_2(n, 65536, [&](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t i = i0; i < i1; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  });
  if (track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = out;
    tape->record([ac, bc, oc]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_const();
      if (ac.requires_grad()) accumulate_grad(ac, g);
      if (bc.requires_grad()) accumulate_grad(bc, g);
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b, Tape* tape) {
  check_same_shape(a, b, "sub");
  Tensor out(a.shape());
  const auto n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = out;
    tape->record([ac, bc, oc]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_const();
      if (ac.requires_grad()) accumulate_grad(ac, g);
      if (bc.requires_grad()) {
        auto& bg = bc.grad();
        for (std::size_t i = 0; i < g.size(); ++i) bg[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b, Tape* tape) {
  check_same_shape(a, b, "mul");
  Tensor out(a.shape());
  const auto n = a.numel();
  parallel_2(n, 65536, [&](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t i = i0; i < i1; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  });
  if (track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = out;
    tape->record([ac, bc, oc]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_const();
      const auto gn = static_cast<std::int64_t>(g.size());
      if (ac.requires_grad()) {
        auto& ag = ac.grad();
        parallel_2(gn, 65536, [&](std::int64_t i0, std::int64_t i1) {
          for (std::int64_t i = i0; i < i1; ++i) {
            ag[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)] * bc.data()[i];
          }
        });
      }
      if (bc.requires_grad()) {
        auto& bg = bc.grad();
        parallel_2(gn, 65536, [&](std::int64_t i0, std::int64_t i1) {
          for (std::int64_t i = i0; i < i1; ++i) {
            bg[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)] * ac.data()[i];
          }
        });
      }
    });
  }
  return out;
}

Tensor divide(const Tensor& a, const Tensor& b, Tape* tape) {
  check_same_shape(a, b, "divide");
  Tensor out(a.shape());
  const auto n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] / b.data()[i];
  if (track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = out;
    tape->record([ac, bc, oc]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_const();
      if (ac.requires_grad()) {
        auto& ag = ac.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i] / bc.data()[i];
      }
      if (bc.requires_grad()) {
        auto& bg = bc.grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double bv = bc.data()[i];
          bg[i] -= g[i] * ac.data()[i] / (bv * bv);
        }
      }
    });
  }
  return out;
}

Tensor add_scalar(const Tensor& a, double c, Tape* tape) {
  Tensor out(a.shape());
  const auto n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + c;
  if (track(tape, {&a})) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    tape->record([ac, oc]() mutable {
      if (!oc.has_grad()) return;
      accumulate_grad(ac, oc.grad_const());
    });
  }
  return out;
}

Tensor mul_scalar(const Tensor& a, double c, Tape* tape) {
  Tensor out(a.shape());
  const auto n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
  if (track(tape, {&a})) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    tape->record([ac, oc, c]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_const();
      auto& ag = ac.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i] * c;
    });
  }
  return out;
}

double softplus_scalar(double x) {
  if (x > 30.0) return x + std::exp(-x);
  if (x < -30.0) return std::exp(x);
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor relu(const Tensor& x, Tape* tape) {
  return unary_op(
      x, tape, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor softplus(const Tensor& x, Tape* tape) {
  return unary_op(x, tape, &softplus_scalar, &sigmoid_scalar);
}

Tensor sqrt_ew(const Tensor& x, Tape* tape) {
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    if (x.data()[i] < 0.0) throw NumericError("sqrt_ew: negative input");
  }
  return unary_op(
      x, tape, [](double v) { return std::sqrt(v); },
      [](double v) { return 0.5 / std::sqrt(v); });
}

Tensor reciprocal(const Tensor& x, Tape* tape) {
  return unary_op(
      x, tape, [](double v) { return 1.0 / v; }, [](double v) { return -1.0 / (v * v); });
}

// --- structure ---------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape new_shape, Tape* tape) {
  if (shape_numel(new_shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(new_shape));
  }
  Tensor out(std::move(new_shape), std::vector<double>(x.vec()));
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    tape->record([xc, oc]() mutable {
      if (!oc.has_grad()) return;
      accumulate_grad(xc, oc.grad_const());
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& idx, Tape* tape) {
  if (x.rank() < 1) throw ShapeError("gather_rows: rank-0 input");
  const std::int64_t rows = x.dim(0);
  const std::int64_t rowsz = x.numel() / rows;
  for (int i : idx) {
    if (i < 0 || i >= rows) throw ShapeError("gather_rows: index out of range");
  }
  Shape os = x.shape();
  os[0] = static_cast<std::int64_t>(idx.size());
  Tensor out(os);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(x.data() + idx[r] * rowsz, rowsz, out.data() + static_cast<std::int64_t>(r) * rowsz);
  }
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    auto ic = idx;
    tape->record([xc, oc, ic, rowsz]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_const();
      auto& xg = xc.grad();
      for (std::size_t r = 0; r < ic.size(); ++r) {
        double* dst = xg.data() + ic[r] * rowsz;
        const double* src = g.data() + static_cast<std::int64_t>(r) * rowsz;
        for (std::int64_t j = 0; j < rowsz; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor scatter_rows(const Tensor& x, const std::vector<int>& idx, std::int64_t out_rows,
                    Tape* tape) {
  if (x.rank() < 1) throw ShapeError("scatter_rows: rank-0 input");
  if (static_cast<std::int64_t>(idx.size()) != x.dim(0)) {
    throw ShapeError("scatter_rows: index count " + std::to_string(idx.size()) +
                     " != rows " + std::to_string(x.dim(0)));
  }
  const std::int64_t rowsz = x.numel() / x.dim(0);
  for (int i : idx) {
    if (i < 0 || i >= out_rows) throw ShapeError("scatter_rows: index out of range");
  }
  Shape os = x.shape();
  os[0] = out_rows;
  Tensor out(os);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    double* dst = out.data() + idx[r] * rowsz;
    const double* src = x.data() + static_cast<std::int64_t>(r) * rowsz;
    for (std::int64_t j = 0; j < rowsz; ++j) dst[j] += src[j];
  }
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    auto ic = idx;
    tape->record([xc, oc, ic, rowsz]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_const();
      auto& xg = xc.grad();
      for (std::size_t r = 0; r < ic.size(); ++r) {
        const double* src = g.data() + ic[r] * rowsz;
        double* dst = xg.data() + static_cast<std::int64_t>(r) * rowsz;
        for (std::int64_t j = 0; j < rowsz; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor select_column(const Tensor& x, std::int64_t col, Tape* tape) {
  if (x.rank() != 2) throw ShapeError("select_column: expected rank-2, got " + shape_str(x.shape()));
  const auto rows = x.dim(0), cols = x.dim(1);
  if (col < 0 || col >= cols) throw ShapeError("select_column: column out of range");
  Tensor out(Shape{rows});
  for (std::int64_t r = 0; r < rows; ++r) out.data()[r] = x.data()[r * cols + col];
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    tape->record([xc, oc, col, rows, cols]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_const();
      auto& xg = xc.grad();
      for (std::int64_t r = 0; r < rows; ++r) xg[static_cast<std::size_t>(r * cols + col)] += g[static_cast<std::size_t>(r)];
    });
  }
  return out;
}

Tensor rowwise_scale(const Tensor& x, const Tensor& s, Tape* tape) {
  if (x.rank() < 1 || s.rank() != 1 || s.dim(0) != x.dim(0)) {
    throw ShapeError("rowwise_scale: need x rows == s length, got " + shape_str(x.shape()) +
                     " and " + shape_str(s.shape()));
  }
  const auto rows = x.dim(0);
  const auto rowsz = x.numel() / rows;
  Tensor out(x.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    const double sv = s.data()[r];
    const double* src = x.data() + r * rowsz;
    double* dst = out.data() + r * rowsz;
    for (std::int64_t j = 0; j < rowsz; ++j) dst[j] = src[j] * sv;
  }
  if (track(tape, {&x, &s})) {
    out.set_requires_grad(true);
    Tensor xc = x, sc = s, oc = out;
    tape->record([xc, sc, oc, rows, rowsz]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_const();
      if (xc.requires_grad()) {
        auto& xg = xc.grad();
        for (std::int64_t r = 0; r < rows; ++r) {
          const double sv = sc.data()[r];
          for (std::int64_t j = 0; j < rowsz; ++j) {
            xg[static_cast<std::size_t>(r * rowsz + j)] += g[static_cast<std::size_t>(r * rowsz + j)] * sv;
          }
        }
      }
      if (sc.requires_grad()) {
        auto& sg = sc.grad();
        for (std::int64_t r = 0; r < rows; ++r) {
          double acc = 0.0;
          for (std::int64_t j = 0; j < rowsz; ++j) {
            acc += g[static_cast<std::size_t>(r * rowsz + j)] * xc.data()[r * rowsz + j];
          }
          sg[static_cast<std::size_t>(r)] += acc;
        }
      }
    });
  }
  return out;
}

// --- conv2d -------------------------------------------------------------------

namespace {

struct ConvDims {
  std::int64_t batch, cin, h, w, cout, kh, kw, oh, ow, k, ncols;
  int stride, padding;
};

ConvDims conv_dims(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
                   int padding) {
  if (input.rank() != 4) {
    throw ShapeError("conv2d: input must be [B,Cin,H,W], got " + shape_str(input.shape()));
  }
  if (weight.rank() != 4) {
    throw ShapeError("conv2d: weight must be [Cout,Cin,kh,kw], got " + shape_str(weight.shape()));
  }
  ConvDims d{};
  d.batch = input.dim(0);
  d.cin = input.dim(1);
  d.h = input.dim(2);
  d.w = input.dim(3);
  d.cout = weight.dim(0);
  d.kh = weight.dim(2);
  d.kw = weight.dim(3);
  d.stride = stride;
  d.padding = padding;
  if (weight.dim(1) != d.cin) {
    throw ShapeError("conv2d: input channel axis " + std::to_string(d.cin) +
                     " != weight channel axis " + std::to_string(weight.dim(1)));
  }
  if (d.kh % 2 == 0 || d.kw % 2 == 0) {
    throw ShapeError("conv2d: kernel sides must be odd, got " + shape_str(weight.shape()));
  }
  if (bias.numel() != d.cout) {
    throw ShapeError("conv2d: bias length " + std::to_string(bias.numel()) + " != Cout " +
                     std::to_string(d.cout));
  }
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: bad stride/padding");
  d.oh = (d.h + 2 * padding - d.kh) / stride + 1;
  d.ow = (d.w + 2 * padding - d.kw) / stride + 1;
  if (d.oh <= 0 || d.ow <= 0) {
    throw ShapeError("conv2d: kernel larger than padded input (H axis " + std::to_string(d.h) +
                     ", W axis " + std::to_string(d.w) + ")");
  }
  d.k = d.cin * d.kh * d.kw;
  d.ncols = d.batch * d.oh * d.ow;
  return d;
}

// Conv scratch matrices are reused across calls; fresh multi-megabyte
// allocations per step otherwise dominate the profile.
struct ConvScratch {
  MatrixXd p, o, dout, dp;
};
ConvScratch& scratch() {
  thread_local ConvScratch s;
  return s;
}

void im2col(const double* in, const ConvDims& d, MatrixXd& p) {
  p.resize(d.k, d.ncols);
  parallel_2(d.ncols, 8192, [&](std::int64_t c0, std::int64_t c1) {
    for (std::int64_t c = c0; c < c1; ++c) {
      const std::int64_t b = c / (d.oh * d.ow);
      const std::int64_t rem = c % (d.oh * d.ow);
      const std::int64_t oh = rem / d.ow;
      const std::int64_t ow = rem % d.ow;
      double* col = p.data() + c * d.k;
      const std::int64_t ih0 = oh * d.stride - d.padding;
      const std::int64_t iw0 = ow * d.stride - d.padding;
      std::int64_t r = 0;
      for (std::int64_t ci = 0; ci < d.cin; ++ci) {
        const double* plane = in + (b * d.cin + ci) * d.h * d.w;
        for (std::int64_t ki = 0; ki < d.kh; ++ki) {
          const std::int64_t ih = ih0 + ki;
          if (ih < 0 || ih >= d.h) {
            for (std::int64_t kj = 0; kj < d.kw; ++kj) col[r++] = 0.0;
            continue;
          }
          const double* row = plane + ih * d.w;
          for (std::int64_t kj = 0; kj < d.kw; ++kj) {
            const std::int64_t iw = iw0 + kj;
            col[r++] = (iw >= 0 && iw < d.w) ? row[iw] : 0.0;
          }
        }
      }
    }
  });
}

// Accumulates dP columns back into the input gradient. Columns of one image
// only touch that image, so the parallel split lands on a batch boundary.
void col2im_acc(const MatrixXd& dp, const ConvDims& d, double* ig) {
  const std::int64_t per_image = d.oh * d.ow;
  parallel_2(d.batch, 2, [&](std::int64_t b0, std::int64_t b1) {
    for (std::int64_t b = b0; b < b1; ++b) {
      for (std::int64_t rem = 0; rem < per_image; ++rem) {
        const std::int64_t c = b * per_image + rem;
        const std::int64_t oh = rem / d.ow;
        const std::int64_t ow = rem % d.ow;
        const double* col = dp.data() + c * d.k;
        const std::int64_t ih0 = oh * d.stride - d.padding;
        const std::int64_t iw0 = ow * d.stride - d.padding;
        std::int64_t r = 0;
        for (std::int64_t ci = 0; ci < d.cin; ++ci) {
          double* plane = ig + (b * d.cin + ci) * d.h * d.w;
          for (std::int64_t ki = 0; ki < d.kh; ++ki) {
            const std::int64_t ih = ih0 + ki;
            if (ih < 0 || ih >= d.h) {
              r += d.kw;
              continue;
            }
            double* row = plane + ih * d.w;
            for (std::int64_t kj = 0; kj < d.kw; ++kj) {
              const std::int64_t iw = iw0 + kj;
              if (iw >= 0 && iw < d.w) row[iw] += col[r];
              ++r;
            }
          }
        }
      }
    }
  });
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int padding, Tape* tape) {
  const ConvDims d = conv_dims(input, weight, bias, stride, padding);
  MatrixXd& p = scratch().p;
  im2col(input.data(), d, p);
  const MatrixXd wm = MapRow(weight.data(), d.cout, d.k);
  MatrixXd& o = scratch().o;
  gemm_nn(wm, p, o);

  Tensor out(Shape{d.batch, d.cout, d.oh, d.ow});
  const std::int64_t per_image = d.oh * d.ow;
  parallel_2(d.ncols, 8192, [&](std::int64_t c0, std::int64_t c1) {
    for (std::int64_t c = c0; c < c1; ++c) {
      const std::int64_t b = c / per_image;
      const std::int64_t rem = c % per_image;
      const double* src = o.data() + c * d.cout;
      double* base = out.data() + b * d.cout * per_image + rem;
      for (std::int64_t co = 0; co < d.cout; ++co) base[co * per_image] = src[co] + bias.data()[co];
    }
  });

  if (track(tape, {&input, &weight, &bias})) {
    out.set_requires_grad(true);
    Tensor ic = input, wc = weight, bc = bias, oc = out;
    tape->record([ic, wc, bc, oc, d]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_const();
      const std::int64_t per_image = d.oh * d.ow;
      MatrixXd& dout = scratch().dout;
      dout.resize(d.cout, d.ncols);
      parallel_2(d.ncols, 8192, [&](std::int64_t c0, std::int64_t c1) {
        for (std::int64_t c = c0; c < c1; ++c) {
          const std::int64_t b = c / per_image;
          const std::int64_t rem = c % per_image;
          const double* base = g.data() + b * d.cout * per_image + rem;
          double* dst = dout.data() + c * d.cout;
          for (std::int64_t co = 0; co < d.cout; ++co) dst[co] = base[co * per_image];
        }
      });
      if (bc.requires_grad()) {
        auto& bg = bc.grad();
        for (std::int64_t co = 0; co < d.cout; ++co) {
          double acc = 0.0;
          for (std::int64_t c = 0; c < d.ncols; ++c) acc += dout(co, c);
          bg[static_cast<std::size_t>(co)] += acc;
        }
      }
      const bool need_w = wc.requires_grad();
      const bool need_x = ic.requires_grad();
      if (!need_w && !need_x) return;
      MatrixXd& p = scratch().p;
      im2col(ic.data(), d, p);  // recomputed instead of cached to bound tape memory
      if (need_w) {
        MatrixXd dw;
        gemm_nt(dout, p, dw);  // [cout, k]
        auto& wg = wc.grad();
        for (std::int64_t co = 0; co < d.cout; ++co) {
          for (std::int64_t r = 0; r < d.k; ++r) wg[static_cast<std::size_t>(co * d.k + r)] += dw(co, r);
        }
      }
      if (need_x) {
        const MatrixXd wm = MapRow(wc.data(), d.cout, d.k);
        const MatrixXd wt = wm.transpose();
        MatrixXd& dp = scratch().dp;
        gemm_nn(wt, dout, dp);  // [k, ncols]
        col2im_acc(dp, d, ic.grad().data());
      }
    });
  }
  return out;
}

// --- batchnorm -----------------------------------------------------------------

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BnState& state,
                 Mode mode, double momentum, double eps, Tape* tape) {
  if (x.rank() != 2 && x.rank() != 4) {
    throw ShapeError("batchnorm: expected rank-2 or rank-4 input, got " + shape_str(x.shape()));
  }
  const std::int64_t batch = x.dim(0);
  const std::int64_t ch = x.dim(1);
  const std::int64_t spatial = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  const std::int64_t m = batch * spatial;
  if (gamma.numel() != ch || beta.numel() != ch) {
    throw ShapeError("batchnorm: affine length " + std::to_string(gamma.numel()) +
                     " != channel axis " + std::to_string(ch));
  }

  std::vector<double> mean(static_cast<std::size_t>(ch), 0.0);
  std::vector<double> var(static_cast<std::size_t>(ch), 0.0);
  if (mode == Mode::kTrain) {
    if (m < 2) throw ValidationError("batchnorm: train mode needs at least 2 values per channel");
    parallel_2(ch, 2, [&](std::int64_t c0, std::int64_t c1) {
      for (std::int64_t c = c0; c < c1; ++c) {
        double acc = 0.0;
        for (std::int64_t b = 0; b < batch; ++b) {
          const double* px = x.data() + (b * ch + c) * spatial;
          for (std::int64_t s = 0; s < spatial; ++s) acc += px[s];
        }
        const double mu = acc / static_cast<double>(m);
        mean[static_cast<std::size_t>(c)] = mu;
        double vacc = 0.0;
        for (std::int64_t b = 0; b < batch; ++b) {
          const double* px = x.data() + (b * ch + c) * spatial;
          for (std::int64_t s = 0; s < spatial; ++s) {
            const double dv = px[s] - mu;
            vacc += dv * dv;
          }
        }
        var[static_cast<std::size_t>(c)] = vacc / static_cast<double>(m);
      }
    });
    if (!state.initialized) {
      state.running_mean = Tensor::from_vector(mean);
      state.running_var = Tensor::from_vector(var);
      state.initialized = true;
    } else {
      for (std::int64_t c = 0; c < ch; ++c) {
        auto ci = static_cast<std::size_t>(c);
        state.running_mean.data()[c] =
            (1.0 - momentum) * state.running_mean.data()[c] + momentum * mean[ci];
        state.running_var.data()[c] =
            (1.0 - momentum) * state.running_var.data()[c] + momentum * var[ci];
      }
    }
  } else {
    if (!state.initialized) {
      throw ValidationError("batchnorm: eval mode before any train-mode call");
    }
    std::copy_n(state.running_mean.data(), ch, mean.data());
    std::copy_n(state.running_var.data(), ch, var.data());
  }

  std::vector<double> inv_sigma(static_cast<std::size_t>(ch));
  for (std::int64_t c = 0; c < ch; ++c) {
    inv_sigma[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var[static_cast<std::size_t>(c)] + eps);
  }

  Tensor out(x.shape());
  parallel_2(ch, 2, [&](std::int64_t c0, std::int64_t c1) {
    for (std::int64_t c = c0; c < c1; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      const double mu = mean[ci], is = inv_sigma[ci];
      const double gga = gamma.data()[c], bbe = beta.data()[c];
      for (std::int64_t b = 0; b < batch; ++b) {
        const double* px = x.data() + (b * ch + c) * spatial;
        double* po = out.data() + (b * ch + c) * spatial;
        for (std::int64_t s = 0; s < spatial; ++s) {
          const double xhat = (px[s] - mu) * is;  // materialized so the affine step rounds once
          po[s] = gga * xhat + bbe;
        }
      }
    }
  });

  if (track(tape, {&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    Tensor xc = x, gc = gamma, bec = beta, oc = out;
    const bool train = mode == Mode::kTrain;
    tape->record([xc, gc, bec, oc, mean, inv_sigma, batch, ch, spatial, m, train]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_const();
      const bool need_x = xc.requires_grad();
      // Per-channel sums of dy and dy*xhat serve both the affine grads and
      // the train-mode input grad.
      std::vector<double> sum_dy(static_cast<std::size_t>(ch), 0.0);
      std::vector<double> sum_dy_xhat(static_cast<std::size_t>(ch), 0.0);
      parallel_2(ch, 2, [&](std::int64_t c0, std::int64_t c1) {
        for (std::int64_t c = c0; c < c1; ++c) {
          const auto ci = static_cast<std::size_t>(c);
          const double mu = mean[ci], is = inv_sigma[ci];
          double s1 = 0.0, s2 = 0.0;
          for (std::int64_t b = 0; b < batch; ++b) {
            const double* px = xc.data() + (b * ch + c) * spatial;
            const double* pg = g.data() + (b * ch + c) * spatial;
            for (std::int64_t s = 0; s < spatial; ++s) {
              s1 += pg[s];
              s2 += pg[s] * (px[s] - mu) * is;
            }
          }
          sum_dy[ci] = s1;
          sum_dy_xhat[ci] = s2;
        }
      });
      if (gc.requires_grad()) {
        auto& gg = gc.grad();
        for (std::int64_t c = 0; c < ch; ++c) gg[static_cast<std::size_t>(c)] += sum_dy_xhat[static_cast<std::size_t>(c)];
      }
      if (bec.requires_grad()) {
        auto& bg = bec.grad();
        for (std::int64_t c = 0; c < ch; ++c) bg[static_cast<std::size_t>(c)] += sum_dy[static_cast<std::size_t>(c)];
      }
      if (!need_x) return;
      auto& xg = xc.grad();
      const double inv_m = 1.0 / static_cast<double>(m);
      parallel_2(ch, 2, [&](std::int64_t c0, std::int64_t c1) {
        for (std::int64_t c = c0; c < c1; ++c) {
          const auto ci = static_cast<std::size_t>(c);
          const double mu = mean[ci], is = inv_sigma[ci];
          const double gga = gc.data()[c];
          const double mdy = sum_dy[ci] * inv_m;
          const double mdyx = sum_dy_xhat[ci] * inv_m;
          for (std::int64_t b = 0; b < batch; ++b) {
            const double* px = xc.data() + (b * ch + c) * spatial;
            const double* pg = g.data() + (b * ch + c) * spatial;
            double* pxg = xg.data() + (b * ch + c) * spatial;
            if (train) {
              for (std::int64_t s = 0; s < spatial; ++s) {
                const double xhat = (px[s] - mu) * is;
                pxg[s] += gga * is * (pg[s] - mdy - xhat * mdyx);
              }
            } else {
              for (std::int64_t s = 0; s < spatial; ++s) pxg[s] += gga * is * pg[s];
            }
          }
        }
      });
    });
  }
  return out;
}

// --- gap / linear ------------------------------------------------------------

Tensor gap(const Tensor& x, Tape* tape) {
  if (x.rank() != 4) throw ShapeError("gap: expected [B,C,H,W], got " + shape_str(x.shape()));
  const auto batch = x.dim(0), ch = x.dim(1), spatial = x.dim(2) * x.dim(3);
  Tensor out(Shape{batch, ch});
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t c = 0; c < ch; ++c) {
      const double* px = x.data() + (b * ch + c) * spatial;
      double acc = 0.0;
      for (std::int64_t s = 0; s < spatial; ++s) acc += px[s];
      out.data()[b * ch + c] = acc / static_cast<double>(spatial);
    }
  }
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    tape->record([xc, oc, batch, ch, spatial]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_const();
      auto& xg = xc.grad();
      const double inv = 1.0 / static_cast<double>(spatial);
      for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t c = 0; c < ch; ++c) {
          const double gv = g[static_cast<std::size_t>(b * ch + c)] * inv;
          double* p = xg.data() + (b * ch + c) * spatial;
          for (std::int64_t s = 0; s < spatial; ++s) p[s] += gv;
        }
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b, Tape* tape) {
  if (x.rank() != 2 || w.rank() != 2) {
    throw ShapeError("linear: expected rank-2 x and w, got " + shape_str(x.shape()) + " and " +
                     shape_str(w.shape()));
  }
  const auto batch = x.dim(0), in_dim = x.dim(1), out_dim = w.dim(0);
  if (w.dim(1) != in_dim) {
    throw ShapeError("linear: feature axis " + std::to_string(in_dim) + " != weight axis " +
                     std::to_string(w.dim(1)));
  }
  if (b.numel() != out_dim) {
    throw ShapeError("linear: bias length " + std::to_string(b.numel()) + " != output axis " +
                     std::to_string(out_dim));
  }
  Tensor out(Shape{batch, out_dim});
  {
    MapRow xm(x.data(), batch, in_dim);
    MapRow wm(w.data(), out_dim, in_dim);
    MapRowMut om(out.data(), batch, out_dim);
    om.noalias() = xm * wm.transpose();
    for (std::int64_t r = 0; r < batch; ++r) {
      for (std::int64_t c = 0; c < out_dim; ++c) out.data()[r * out_dim + c] += b.data()[c];
    }
  }
  if (track(tape, {&x, &w, &b})) {
    out.set_requires_grad(true);
    Tensor xc = x, wc = w, bc = b, oc = out;
    tape->record([xc, wc, bc, oc, batch, in_dim, out_dim]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_const();
      MapRow gm(g.data(), batch, out_dim);
      if (xc.requires_grad()) {
        MapRow wm(wc.data(), out_dim, in_dim);
        MapRowMut xg(xc.grad().data(), batch, in_dim);
        xg.noalias() += gm * wm;
      }
      if (wc.requires_grad()) {
        MapRow xm(xc.data(), batch, in_dim);
        MapRowMut wg(wc.grad().data(), out_dim, in_dim);
        wg.noalias() += gm.transpose() * xm;
      }
      if (bc.requires_grad()) {
        auto& bg = bc.grad();
        for (std::int64_t r = 0; r < batch; ++r) {
          for (std::int64_t c = 0; c < out_dim; ++c) bg[static_cast<std::size_t>(c)] += g[static_cast<std::size_t>(r * out_dim + c)];
        }
      }
    });
  }
  return out;
}

// --- reductions ---------------------------------------------------------------

Tensor sum_all(const Tensor& x, Tape* tape) {
  double acc = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) acc += x.data()[i];
  Tensor out = Tensor::scalar(acc);
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    tape->record([xc, oc]() mutable {
      if (!oc.has_grad()) return;
      const double g = oc.grad_const()[0];
      auto& xg = xc.grad();
      for (auto& v : xg) v += g;
    });
  }
  return out;
}

Tensor mean_all(const Tensor& x, Tape* tape) {
  const double inv = 1.0 / static_cast<double>(x.numel());
  double acc = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) acc += x.data()[i];
  Tensor out = Tensor::scalar(acc * inv);
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    tape->record([xc, oc, inv]() mutable {
      if (!oc.has_grad()) return;
      const double g = oc.grad_const()[0] * inv;
      auto& xg = xc.grad();
      for (auto& v : xg) v += g;
    });
  }
  return out;
}

Tensor sum_rows(const Tensor& x, Tape* tape) {
  if (x.rank() != 2) throw ShapeError("sum_rows: expected rank-2, got " + shape_str(x.shape()));
  const auto rows = x.dim(0), cols = x.dim(1);
  Tensor out(Shape{rows});
  for (std::int64_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) acc += x.data()[r * cols + c];
    out.data()[r] = acc;
  }
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    tape->record([xc, oc, rows, cols]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_const();
      auto& xg = xc.grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t c = 0; c < cols; ++c) xg[static_cast<std::size_t>(r * cols + c)] += g[static_cast<std::size_t>(r)];
      }
    });
  }
  return out;
}

Tensor column_sum(const Tensor& x, Tape* tape) {
  if (x.rank() != 2) throw ShapeError("column_sum: expected rank-2, got " + shape_str(x.shape()));
  const auto rows = x.dim(0), cols = x.dim(1);
  Tensor out(Shape{cols});
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t c = 0; c < cols; ++c) out.data()[c] += x.data()[r * cols + c];
  }
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    tape->record([xc, oc, rows, cols]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_const();
      auto& xg = xc.grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t c = 0; c < cols; ++c) xg[static_cast<std::size_t>(r * cols + c)] += g[static_cast<std::size_t>(c)];
      }
    });
  }
  return out;
}

// --- masked softmax / top-k -----------------------------------------------------

Tensor softmax_masked(const Tensor& x, Tape* tape) {
  if (x.rank() != 1 && x.rank() != 2) {
    throw ShapeError("softmax_masked: expected rank-1 or rank-2, got " + shape_str(x.shape()));
  }
  const std::int64_t rows = x.rank() == 2 ? x.dim(0) : 1;
  const std::int64_t cols = x.rank() == 2 ? x.dim(1) : x.dim(0);
  Tensor out(x.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* px = x.data() + r * cols;
    double* po = out.data() + r * cols;
    double mx = -kInf;
    for (std::int64_t c = 0; c < cols; ++c) {
      if (px[c] > mx) mx = px[c];
    }
    if (!std::isfinite(mx)) {
      throw NumericError("softmax_masked: empty support (all entries -inf) in row " +
                         std::to_string(r));
    }
    double sum = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) {
      if (px[c] == -kInf) {
        po[c] = 0.0;
      } else {
        po[c] = std::exp(px[c] - mx);
        sum += po[c];
      }
    }
    for (std::int64_t c = 0; c < cols; ++c) po[c] /= sum;
  }
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    tape->record([xc, oc, rows, cols]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_const();
      auto& xg = xc.grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* py = oc.data() + r * cols;
        const double* pg = g.data() + r * cols;
        const double* px = xc.data() + r * cols;
        double dot = 0.0;
        for (std::int64_t c = 0; c < cols; ++c) dot += pg[c] * py[c];
        for (std::int64_t c = 0; c < cols; ++c) {
          if (px[c] == -kInf) continue;  // masked entries get no gradient
          xg[static_cast<std::size_t>(r * cols + c)] += py[c] * (pg[c] - dot);
        }
      }
    });
  }
  return out;
}

std::vector<int> topk_indices(std::span<const double> v, int k) {
  std::vector<int> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (v[static_cast<std::size_t>(a)] != v[static_cast<std::size_t>(b)]) {
      return v[static_cast<std::size_t>(a)] > v[static_cast<std::size_t>(b)];
    }
    return a < b;  // ties: lower index wins
  });
  order.resize(static_cast<std::size_t>(k));
  std::sort(order.begin(), order.end());
  return order;
}

Tensor keep_topk_rows(const Tensor& x, int k, Tape* tape,
                      std::vector<std::vector<int>>* selected) {
  if (x.rank() != 1 && x.rank() != 2) {
    throw ShapeError("keep_topk_rows: expected rank-1 or rank-2, got " + shape_str(x.shape()));
  }
  const std::int64_t rows = x.rank() == 2 ? x.dim(0) : 1;
  const std::int64_t cols = x.rank() == 2 ? x.dim(1) : x.dim(0);
  if (k < 1 || k > cols) {
    throw ValidationError("keep_topk_rows: k=" + std::to_string(k) + " out of range for " +
                          std::to_string(cols) + " entries");
  }
  Tensor out(x.shape(), -kInf);
  std::vector<std::vector<int>> sel(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* px = x.data() + r * cols;
    auto idx = topk_indices(std::span<const double>(px, static_cast<std::size_t>(cols)), k);
    for (int i : idx) out.data()[r * cols + i] = px[i];
    sel[static_cast<std::size_t>(r)] = std::move(idx);
  }
  if (selected) *selected = sel;
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    tape->record([xc, oc, sel, cols]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_const();
      auto& xg = xc.grad();
      for (std::size_t r = 0; r < sel.size(); ++r) {
        for (int i : sel[r]) {
          xg[r * static_cast<std::size_t>(cols) + static_cast<std::size_t>(i)] +=
              g[r * static_cast<std::size_t>(cols) + static_cast<std::size_t>(i)];
        }
      }
    });
  }
  return out;
}

// --- contrastive helpers ----------------------------------------------------------

Tensor gram(const Tensor& x, Tape* tape) {
  if (x.rank() != 2) throw ShapeError("gram: expected rank-2, got " + shape_str(x.shape()));
  const auto n = x.dim(0), d = x.dim(1);
  Tensor out(Shape{n, n});
  {
    MapRow xm(x.data(), n, d);
    MapRowMut om(out.data(), n, n);
    om.noalias() = xm * xm.transpose();
  }
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    tape->record([xc, oc, n, d]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_const();
      MapRow gm(g.data(), n, n);
      MapRow xm(xc.data(), n, d);
      MapRowMut xg(xc.grad().data(), n, d);
      xg.noalias() += (gm + gm.transpose()) * xm;
    });
  }
  return out;
}

Tensor gather_pairs(const Tensor& s, const std::vector<int>& partner, Tape* tape) {
  if (s.rank() != 2 || s.dim(0) != s.dim(1)) {
    throw ShapeError("gather_pairs: expected square matrix, got " + shape_str(s.shape()));
  }
  const auto n = s.dim(0);
  if (static_cast<std::int64_t>(partner.size()) != n) {
    throw ShapeError("gather_pairs: partner list length mismatch");
  }
  Tensor out(Shape{n});
  for (std::int64_t i = 0; i < n; ++i) {
    const int p = partner[static_cast<std::size_t>(i)];
    if (p < 0 || p >= n) throw ShapeError("gather_pairs: partner index out of range");
    out.data()[i] = s.data()[i * n + p];
  }
  if (track(tape, {&s})) {
    out.set_requires_grad(true);
    Tensor sc = s, oc = out;
    auto pc = partner;
    tape->record([sc, oc, pc, n]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_const();
      auto& sg = sc.grad();
      for (std::int64_t i = 0; i < n; ++i) {
        sg[static_cast<std::size_t>(i * n + pc[static_cast<std::size_t>(i)])] += g[static_cast<std::size_t>(i)];
      }
    });
  }
  return out;
}

Tensor logsumexp_offdiag_rows(const Tensor& s, Tape* tape) {
  if (s.rank() != 2 || s.dim(0) != s.dim(1)) {
    throw ShapeError("logsumexp_offdiag_rows: expected square matrix, got " + shape_str(s.shape()));
  }
  const auto n = s.dim(0);
  if (n < 2) throw ValidationError("logsumexp_offdiag_rows: need at least 2 rows");
  Tensor out(Shape{n});
  for (std::int64_t i = 0; i < n; ++i) {
    const double* row = s.data() + i * n;
    double mx = -kInf;
    for (std::int64_t j = 0; j < n; ++j) {
      if (j != i && row[j] > mx) mx = row[j];
    }
    double acc = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
      if (j != i) acc += std::exp(row[j] - mx);
    }
    out.data()[i] = mx + std::log(acc);
  }
  if (track(tape, {&s})) {
    out.set_requires_grad(true);
    Tensor sc = s, oc = out;
    tape->record([sc, oc, n]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_const();
      auto& sg = sc.grad();
      for (std::int64_t i = 0; i < n; ++i) {
        const double* row = sc.data() + i * n;
        const double lse = oc.data()[i];
        const double gi = g[static_cast<std::size_t>(i)];
        for (std::int64_t j = 0; j < n; ++j) {
          if (j == i) continue;
          sg[static_cast<std::size_t>(i * n + j)] += gi * std::exp(row[j] - lse);
        }
      }
    });
  }
  return out;
}

double l2norm(std::span<const double> x) {
  double acc = 0.0;
  for (double v : x) acc += v * v;
  return std::sqrt(acc);
}

}  // namespace moescope::nd
