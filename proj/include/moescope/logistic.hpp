#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "moescope/tensor.hpp"

namespace moescope {

struct LogisticModel {
  std::vector<double> w;
  double b = 0.0;
  int iterations = 0;
  double grad_norm = 0.0;
};

// L2-regularized binary logistic regression: minimizes
// 0.5*||w||^2 + C * sum_i log(1 + exp(-y_i f_i)), intercept unpenalized.
// Damped Newton iterations until the gradient norm drops below 1e-6.
LogisticModel logistic_fit(const nd::Tensor& x, std::span<const int> y01, double c = 1.0,
                           int max_iters = 100);

double logistic_decision(const LogisticModel& m, std::span<const double> features);

// K-fold cross-validated balanced accuracy (mean of the two class recalls)
// for samples xa (class 0) vs xb (class 1), stratified folds.
double pairwise_balanced_accuracy(const nd::Tensor& xa, const nd::Tensor& xb, int folds,
                                  std::uint64_t seed, double c = 1.0);

}  // namespace moescope
