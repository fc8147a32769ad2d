#include "moescope/mds.hpp"

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <cmath>

namespace moescope {

MdsResult mds_2d(const DissimilarityMatrix& dist) {
  dist.validate();
  const auto n = dist.size();
  if (n < 3) throw ValidationError("mds: need at least 3 items");
  double maxd = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < n; ++j) maxd = std::max(maxd, dist.at(i, j));
  }
  if (maxd == 0.0) throw ValidationError("mds: all distances are zero");

  Eigen::MatrixXd b(n, n);
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      const double d = dist.at(i, j);
      b(i, j) = d * d;
    }
  }
  // double centering: B = -1/2 J D^2 J
  const Eigen::VectorXd row_mean = b.rowwise().mean();
  const double total_mean = b.mean();
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      b(i, j) = -0.5 * (b(i, j) - row_mean(i) - row_mean(j) + total_mean);
    }
  }

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(b);
  if (solver.info() != Eigen::Success) throw NumericError("mds: eigendecomposition failed");

  MdsResult out;
  out.coords = nd::Tensor(nd::Shape{n, 2});
  for (int comp = 0; comp < 2; ++comp) {
    double lambda = solver.eigenvalues()(n - 1 - comp);  // ascending order in Eigen
    if (lambda < 0.0) {
      lambda = 0.0;
      out.clamped_negative = true;
    }
    out.eigenvalues.push_back(lambda);
    Eigen::VectorXd v = solver.eigenvectors().col(n - 1 - comp);
    // deterministic sign: the entry with the largest magnitude is positive
    std::int64_t arg = 0;
    for (std::int64_t i = 1; i < n; ++i) {
      if (std::fabs(v(i)) > std::fabs(v(arg))) arg = i;
    }
    if (v(arg) < 0.0) v = -v;
    const double scale = std::sqrt(lambda);
    for (std::int64_t i = 0; i < n; ++i) out.coords.data()[i * 2 + comp] = v(i) * scale;
  }
  return out;
}

}  // namespace moescope
