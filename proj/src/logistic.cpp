#include "moescope/logistic.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

#include "moescope/ops.hpp"
#include "moescope/rng.hpp"

namespace moescope {

using nd::Tensor;

namespace {

double objective(const Eigen::MatrixXd& x, const Eigen::VectorXd& ysign,
                 const Eigen::VectorXd& wb, double c) {
  const auto d = x.cols();
  const Eigen::VectorXd f = x * wb.head(d) + Eigen::VectorXd::Constant(x.rows(), wb(d));
  double loss = 0.5 * wb.head(d).squaredNorm();
  for (Eigen::Index i = 0; i < f.size(); ++i) {
    const double m = -ysign(i) * f(i);
    loss += c * (m > 30.0 ? m : std::log1p(std::exp(m)));
  }
  return loss;
}

}  // namespace

LogisticModel logistic_fit(const Tensor& x, std::span<const int> y01, double c, int max_iters) {
  if (x.rank() != 2) throw ShapeError("logistic: X must be [n,d]");
  const auto n = x.dim(0), d = x.dim(1);
  if (static_cast<std::size_t>(n) != y01.size()) throw ShapeError("logistic: label count mismatch");

  Eigen::MatrixXd xm(n, d);
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < d; ++j) xm(i, j) = x.data()[i * d + j];
  }
  Eigen::VectorXd ysign(n);
  for (std::int64_t i = 0; i < n; ++i) ysign(i) = y01[static_cast<std::size_t>(i)] ? 1.0 : -1.0;

  Eigen::VectorXd wb = Eigen::VectorXd::Zero(d + 1);
  LogisticModel model;
  for (int iter = 0; iter < max_iters; ++iter) {
    const Eigen::VectorXd f = xm * wb.head(d) + Eigen::VectorXd::Constant(n, wb(d));
    Eigen::VectorXd p(n), s(n);
    for (std::int64_t i = 0; i < n; ++i) {
      p(i) = nd::sigmoid_scalar(f(i));
      s(i) = std::max(p(i) * (1.0 - p(i)), 1e-10);
    }
    Eigen::VectorXd y01v(n);
    for (std::int64_t i = 0; i < n; ++i) y01v(i) = ysign(i) > 0 ? 1.0 : 0.0;
    Eigen::VectorXd grad(d + 1);
    grad.head(d) = c * (xm.transpose() * (p - y01v)) + wb.head(d);
    grad(d) = c * (p - y01v).sum();

    model.grad_norm = grad.norm();
    model.iterations = iter;
    if (model.grad_norm < 1e-6) break;

    Eigen::MatrixXd h(d + 1, d + 1);
    const Eigen::MatrixXd xs = xm.array().colwise() * s.array();
    h.topLeftCorner(d, d) = c * (xm.transpose() * xs);
    h.topLeftCorner(d, d) += Eigen::MatrixXd::Identity(d, d);
    h.topRightCorner(d, 1) = c * (xs.colwise().sum()).transpose();
    h.bottomLeftCorner(1, d) = h.topRightCorner(d, 1).transpose();
    h(d, d) = c * s.sum() + 1e-10;

    const Eigen::VectorXd step = h.ldlt().solve(grad);
    // backtracking keeps Newton honest on ill-scaled data
    const double base = objective(xm, ysign, wb, c);
    double t = 1.0;
    Eigen::VectorXd next = wb - t * step;
    for (int bt = 0; bt < 40 && objective(xm, ysign, next, c) > base; ++bt) {
      t *= 0.5;
      next = wb - t * step;
    }
    wb = next;
  }
  model.w.assign(wb.data(), wb.data() + d);
  model.b = wb(d);
  return model;
}

double logistic_decision(const LogisticModel& m, std::span<const double> features) {
  if (features.size() != m.w.size()) throw ShapeError("logistic: feature length mismatch");
  double f = m.b;
  for (std::size_t j = 0; j < features.size(); ++j) f += m.w[j] * features[j];
  return nd::sigmoid_scalar(f);
}

double pairwise_balanced_accuracy(const Tensor& xa, const Tensor& xb, int folds,
                                  std::uint64_t seed, double c) {
  if (xa.rank() != 2 || xb.rank() != 2 || xa.dim(1) != xb.dim(1)) {
    throw ShapeError("balanced accuracy: feature matrices disagree");
  }
  const auto na = xa.dim(0), nb = xb.dim(0), d = xa.dim(1);
  if (na < folds || nb < folds) {
    throw ValidationError("balanced accuracy: a class has fewer samples than folds (" +
                          std::to_string(std::min(na, nb)) + " < " + std::to_string(folds) + ")");
  }

  // stratified fold ids per class
  auto fold_ids = [&](std::int64_t count, std::uint64_t s) {
    std::vector<int> ids(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) ids[static_cast<std::size_t>(i)] = static_cast<int>(i % folds);
    SequentialRng rng(s);
    for (std::int64_t i = count - 1; i > 0; --i) {
      const auto j = static_cast<std::int64_t>(rng.index(static_cast<std::uint64_t>(i + 1)));
      std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(j)]);
    }
    return ids;
  };
  const auto ida = fold_ids(na, seed * 2 + 1);
  const auto idb = fold_ids(nb, seed * 2 + 2);

  double acc = 0.0;
  for (int f = 0; f < folds; ++f) {
    std::vector<double> rows;
    std::vector<int> labels;
    for (std::int64_t i = 0; i < na; ++i) {
      if (ida[static_cast<std::size_t>(i)] == f) continue;
      rows.insert(rows.end(), xa.data() + i * d, xa.data() + (i + 1) * d);
      labels.push_back(0);
    }
    for (std::int64_t i = 0; i < nb; ++i) {
      if (idb[static_cast<std::size_t>(i)] == f) continue;
      rows.insert(rows.end(), xb.data() + i * d, xb.data() + (i + 1) * d);
      labels.push_back(1);
    }
    Tensor xtr(nd::Shape{static_cast<std::int64_t>(labels.size()), d}, std::move(rows));
    const LogisticModel m = logistic_fit(xtr, labels, c);

    std::int64_t tna = 0, ca = 0, tnb = 0, cb = 0;
    for (std::int64_t i = 0; i < na; ++i) {
      if (ida[static_cast<std::size_t>(i)] != f) continue;
      ++tna;
      if (logistic_decision(m, std::span<const double>(xa.data() + i * d, static_cast<std::size_t>(d))) < 0.5) ++ca;
    }
    for (std::int64_t i = 0; i < nb; ++i) {
      if (idb[static_cast<std::size_t>(i)] != f) continue;
      ++tnb;
      if (logistic_decision(m, std::span<const double>(xb.data() + i * d, static_cast<std::size_t>(d))) >= 0.5) ++cb;
    }
    const double recall_a = tna ? static_cast<double>(ca) / static_cast<double>(tna) : 0.0;
    const double recall_b = tnb ? static_cast<double>(cb) / static_cast<double>(tnb) : 0.0;
    acc += 0.5 * (recall_a + recall_b);
  }
  return acc / folds;
}

}  // namespace moescope
