#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "moescope/tensor.hpp"

namespace moescope {

struct LassoFit {
  std::vector<double> beta;  // nonnegative by construction
  double intercept = 0.0;
  int sweeps = 0;
};

// Nonnegative lasso: minimizes (1/2n)||y - X b - b0||^2 + lambda*sum(b)
// subject to b >= 0 via cyclic coordinate descent with nonnegative
// soft-thresholding. Converged when the largest coefficient change in a
// sweep drops below 1e-7.
LassoFit nn_lasso(const nd::Tensor& x, std::span<const double> y, double lambda,
                  int max_sweeps = 10000);

double lasso_objective(const nd::Tensor& x, std::span<const double> y, double lambda,
                       const LassoFit& fit);
std::vector<double> lasso_predict(const nd::Tensor& x, const LassoFit& fit);

struct KktReport {
  double max_active_violation = 0.0;    // |grad_j + lambda| over b_j > 0
  double max_inactive_violation = 0.0;  // max(0, -(grad_j + lambda)) over b_j = 0
};
KktReport nn_lasso_kkt(const nd::Tensor& x, std::span<const double> y, double lambda,
                       const LassoFit& fit);

// 40 log-spaced values in [lo, hi], ascending.
std::vector<double> lambda_grid(int count = 40, double lo = 1e-4, double hi = 1.0);

struct LassoCvResult {
  double r2_mean = 0.0;
  double r2_std = 0.0;
  std::vector<double> fold_r2;       // per included outer fold
  std::vector<int> flagged_folds;    // outer folds excluded (constant test target)
  std::vector<double> coefficients;  // final refit, original column scale
  double intercept = 0.0;
  double lambda_full = 0.0;          // regularization chosen for the final refit
};

// Nested cross-validation: the inner k-fold grid search picks lambda by mean
// validation r^2, the outer folds report held-out r^2, and the final
// coefficients come from refitting on the full dataset with the lambda a
// full-data inner search selects. Predictors are standardized inside each
// training fold; reported coefficients are mapped back to the original
// column scale.
LassoCvResult nn_lasso_nested_cv(const nd::Tensor& x, std::span<const double> y,
                                 std::uint64_t seed, int outer_k = 5, int inner_k = 5,
                                 const std::vector<double>& grid = lambda_grid());

}  // namespace moescope
