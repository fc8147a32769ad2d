#include "moescope/lasso.hpp"

#include <algorithm>
#include <cmath>

#include "moescope/stats.hpp"
#include "moescope/train.hpp"

namespace moescope {

using nd::Tensor;

namespace {

void check_xy(const Tensor& x, std::span<const double> y) {
  if (x.rank() != 2) throw ShapeError("lasso: X must be [n,D], got " + nd::shape_str(x.shape()));
  if (static_cast<std::size_t>(x.dim(0)) != y.size()) {
    throw ShapeError("lasso: X has " + std::to_string(x.dim(0)) + " rows, y has " +
                     std::to_string(y.size()));
  }
  if (x.dim(0) < 2) throw ValidationError("lasso: need at least 2 rows");
}

}  // namespace

LassoFit nn_lasso(const Tensor& x, std::span<const double> y, double lambda, int max_sweeps) {
  check_xy(x, y);
  if (lambda < 0.0) throw ValidationError("lasso: lambda must be >= 0");
  const auto n = x.dim(0);
  const auto d = x.dim(1);
  const double inv_n = 1.0 / static_cast<double>(n);

  std::vector<double> col_mean(static_cast<std::size_t>(d), 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < d; ++j) col_mean[static_cast<std::size_t>(j)] += x.data()[i * d + j];
  }
  for (auto& v : col_mean) v *= inv_n;
  const double y_mean = stats::mean(y);

  // centered copies; the intercept absorbs the means
  std::vector<double> xc(static_cast<std::size_t>(n * d));
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < d; ++j) {
      xc[static_cast<std::size_t>(i * d + j)] =
          x.data()[i * d + j] - col_mean[static_cast<std::size_t>(j)];
    }
  }
  std::vector<double> resid(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) resid[static_cast<std::size_t>(i)] = y[static_cast<std::size_t>(i)] - y_mean;

  std::vector<double> denom(static_cast<std::size_t>(d), 0.0);
  for (std::int64_t j = 0; j < d; ++j) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      const double v = xc[static_cast<std::size_t>(i * d + j)];
      acc += v * v;
    }
    denom[static_cast<std::size_t>(j)] = acc * inv_n;
  }

  LassoFit fit;
  fit.beta.assign(static_cast<std::size_t>(d), 0.0);
  double last_change = 0.0;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double max_change = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const auto js = static_cast<std::size_t>(j);
      if (denom[js] == 0.0) continue;  // constant column never activates
      double dot = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        dot += xc[static_cast<std::size_t>(i * d + j)] * resid[static_cast<std::size_t>(i)];
      }
      const double rho = dot * inv_n + denom[js] * fit.beta[js];
      const double bnew = std::max(0.0, (rho - lambda) / denom[js]);
      const double delta = bnew - fit.beta[js];
      if (delta != 0.0) {
        for (std::int64_t i = 0; i < n; ++i) {
          resid[static_cast<std::size_t>(i)] -= xc[static_cast<std::size_t>(i * d + j)] * delta;
        }
        fit.beta[js] = bnew;
      }
      max_change = std::max(max_change, std::fabs(delta));
    }
    fit.sweeps = sweep + 1;
    last_change = max_change;
    if (max_change < 1e-7) {
      double dot = 0.0;
      for (std::int64_t j = 0; j < d; ++j) dot += fit.beta[static_cast<std::size_t>(j)] * col_mean[static_cast<std::size_t>(j)];
      fit.intercept = y_mean - dot;
      return fit;
    }
  }
  double rn = 0.0;
  for (double r : resid) rn += r * r;
  throw NumericError("nn_lasso: no convergence after " + std::to_string(max_sweeps) +
                     " sweeps (last max coefficient change " + std::to_string(last_change) +
                     ", residual sum of squares " + std::to_string(rn) + ")");
}

std::vector<double> lasso_predict(const Tensor& x, const LassoFit& fit) {
  const auto n = x.dim(0), d = x.dim(1);
  if (static_cast<std::size_t>(d) != fit.beta.size()) {
    throw ShapeError("lasso predict: column count mismatch");
  }
  std::vector<double> out(static_cast<std::size_t>(n), fit.intercept);
  for (std::int64_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::int64_t j = 0; j < d; ++j) acc += x.data()[i * d + j] * fit.beta[static_cast<std::size_t>(j)];
    out[static_cast<std::size_t>(i)] += acc;
  }
  return out;
}

double lasso_objective(const Tensor& x, std::span<const double> y, double lambda,
                       const LassoFit& fit) {
  const auto n = x.dim(0);
  const auto pred = lasso_predict(x, fit);
  double sq = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double r = y[static_cast<std::size_t>(i)] - pred[static_cast<std::size_t>(i)];
    sq += r * r;
  }
  double l1 = 0.0;
  for (double b : fit.beta) l1 += b;
  return 0.5 * sq / static_cast<double>(n) + lambda * l1;
}

KktReport nn_lasso_kkt(const Tensor& x, std::span<const double> y, double lambda,
                       const LassoFit& fit) {
  check_xy(x, y);
  const auto n = x.dim(0), d = x.dim(1);
  const double inv_n = 1.0 / static_cast<double>(n);
  const auto pred = lasso_predict(x, fit);
  std::vector<double> resid(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    resid[static_cast<std::size_t>(i)] = y[static_cast<std::size_t>(i)] - pred[static_cast<std::size_t>(i)];
  }
  std::vector<double> col_mean(static_cast<std::size_t>(d), 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < d; ++j) col_mean[static_cast<std::size_t>(j)] += x.data()[i * d + j];
  }
  for (auto& v : col_mean) v *= inv_n;

  KktReport rep;
  for (std::int64_t j = 0; j < d; ++j) {
    double dot = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      dot += (x.data()[i * d + j] - col_mean[static_cast<std::size_t>(j)]) * resid[static_cast<std::size_t>(i)];
    }
    const double grad = -dot * inv_n;  // d/db_j of the smooth part
    const double station = grad + lambda;
    if (fit.beta[static_cast<std::size_t>(j)] > 0.0) {
      rep.max_active_violation = std::max(rep.max_active_violation, std::fabs(station));
    } else {
      rep.max_inactive_violation = std::max(rep.max_inactive_violation, std::max(0.0, -station));
    }
  }
  return rep;
}

std::vector<double> lambda_grid(int count, double lo, double hi) {
  std::vector<double> grid(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const double t = count == 1 ? 0.0 : static_cast<double>(i) / (count - 1);
    grid[static_cast<std::size_t>(i)] = lo * std::pow(hi / lo, t);
  }
  return grid;
}

namespace {

struct Standardizer {
  std::vector<double> mu, sigma;
  void fit(const Tensor& x, const std::vector<int>& rows) {
    const auto d = x.dim(1);
    mu.assign(static_cast<std::size_t>(d), 0.0);
    sigma.assign(static_cast<std::size_t>(d), 1.0);
    for (int r : rows) {
      for (std::int64_t j = 0; j < d; ++j) mu[static_cast<std::size_t>(j)] += x.data()[r * d + j];
    }
    for (auto& v : mu) v /= static_cast<double>(rows.size());
    for (std::int64_t j = 0; j < d; ++j) {
      double acc = 0.0;
      for (int r : rows) {
        const double dv = x.data()[r * d + j] - mu[static_cast<std::size_t>(j)];
        acc += dv * dv;
      }
      const double sd = std::sqrt(acc / static_cast<double>(rows.size()));
      sigma[static_cast<std::size_t>(j)] = sd > 1e-12 ? sd : 1.0;
    }
  }
  Tensor apply(const Tensor& x, const std::vector<int>& rows) const {
    const auto d = x.dim(1);
    Tensor out(nd::Shape{static_cast<std::int64_t>(rows.size()), d});
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::int64_t j = 0; j < d; ++j) {
        out.data()[static_cast<std::int64_t>(i) * d + j] =
            (x.data()[rows[i] * d + j] - mu[static_cast<std::size_t>(j)]) / sigma[static_cast<std::size_t>(j)];
      }
    }
    return out;
  }
};

std::vector<double> gather_y(std::span<const double> y, const std::vector<int>& rows) {
  std::vector<double> out;
  out.reserve(rows.size());
  for (int r : rows) out.push_back(y[static_cast<std::size_t>(r)]);
  return out;
}

// Mean validation r^2 for each lambda over the folds; NaN folds are skipped.
double grid_search_lambda(const Tensor& x, std::span<const double> y,
                          const std::vector<int>& rows, int folds, std::uint64_t seed,
                          const std::vector<double>& grid) {
  const auto splits = kfold_split(static_cast<int>(rows.size()), folds, seed);
  double best_score = -1e300;
  double best_lambda = grid.front();
  for (double lambda : grid) {
    double acc = 0.0;
    int used = 0;
    for (const auto& split : splits) {
      std::vector<int> tr, te;
      for (int i : split.train_idx) tr.push_back(rows[static_cast<std::size_t>(i)]);
      for (int i : split.test_idx) te.push_back(rows[static_cast<std::size_t>(i)]);
      Standardizer st;
      st.fit(x, tr);
      const LassoFit fit = nn_lasso(st.apply(x, tr), gather_y(y, tr), lambda);
      const auto pred = lasso_predict(st.apply(x, te), fit);
      const double r2 = stats::r2_score(gather_y(y, te), pred);
      if (std::isnan(r2)) continue;
      acc += r2;
      ++used;
    }
    if (used == 0) continue;
    const double score = acc / used;
    if (score > best_score) {
      best_score = score;
      best_lambda = lambda;
    }
  }
  return best_lambda;
}

}  // namespace

LassoCvResult nn_lasso_nested_cv(const Tensor& x, std::span<const double> y, std::uint64_t seed,
                                 int outer_k, int inner_k, const std::vector<double>& grid) {
  check_xy(x, y);
  if (grid.empty()) throw ValidationError("lasso cv: empty lambda grid");
  const auto n = static_cast<int>(x.dim(0));
  if (n < outer_k * inner_k) {
    throw ValidationError("lasso cv: " + std::to_string(n) + " rows cannot support nested " +
                          std::to_string(outer_k) + "x" + std::to_string(inner_k) + " folds");
  }
  LassoCvResult out;
  const auto outer = kfold_split(n, outer_k, seed);
  for (std::size_t f = 0; f < outer.size(); ++f) {
    const auto& split = outer[f];
    const double lambda =
        grid_search_lambda(x, y, split.train_idx, inner_k, seed * 1000 + f, grid);
    Standardizer st;
    st.fit(x, split.train_idx);
    const LassoFit fit = nn_lasso(st.apply(x, split.train_idx), gather_y(y, split.train_idx), lambda);
    const auto pred = lasso_predict(st.apply(x, split.test_idx), fit);
    const double r2 = stats::r2_score(gather_y(y, split.test_idx), pred);
    if (std::isnan(r2)) {
      out.flagged_folds.push_back(static_cast<int>(f));
      continue;
    }
    out.fold_r2.push_back(r2);
  }
  if (out.fold_r2.empty()) {
    throw NumericError("lasso cv: every outer fold had a constant test target");
  }
  out.r2_mean = stats::mean(out.fold_r2);
  out.r2_std = stats::stddev_pop(out.fold_r2);

  // final refit on the full dataset with a full-data grid search
  std::vector<int> all(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
  out.lambda_full = grid_search_lambda(x, y, all, inner_k, seed * 7919, grid);
  Standardizer st;
  st.fit(x, all);
  const LassoFit fit = nn_lasso(st.apply(x, all), y, out.lambda_full);
  const auto d = x.dim(1);
  out.coefficients.assign(static_cast<std::size_t>(d), 0.0);
  double shift = 0.0;
  for (std::int64_t j = 0; j < d; ++j) {
    const auto js = static_cast<std::size_t>(j);
    out.coefficients[js] = fit.beta[js] / st.sigma[js];
    shift += fit.beta[js] * st.mu[js] / st.sigma[js];
  }
  out.intercept = fit.intercept - shift;
  return out;
}

}  // namespace moescope
