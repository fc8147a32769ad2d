#pragma once

#include <span>
#include <vector>

namespace moescope::stats {

double mean(std::span<const double> x);
double variance_pop(std::span<const double> x);
double stddev_pop(std::span<const double> x);

// Pearson correlation; NaN when either input is constant.
double pearson(std::span<const double> x, std::span<const double> y);

// Ranks starting at 1, ties receive the average rank.
std::vector<double> average_ranks(std::span<const double> x);

// Spearman rank correlation with average ranks; NaN when an input is constant.
double spearman(std::span<const double> x, std::span<const double> y);

// 1 - SS_res/SS_tot; negative values reported as-is, NaN when y is constant.
double r2_score(std::span<const double> y_true, std::span<const double> y_pred);

}  // namespace moescope::stats
