#pragma once

// Central finite-difference gradient checking used across the test suites.
// The forward callback must be a pure function of the tensors' current
// values (fresh tape / fresh batchnorm state on every call).

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "moescope/tensor.hpp"

namespace fd {

struct Report {
  double max_rel_err = 0.0;
  int checked = 0;
};

inline double rel_err(double a, double b) {
  const double denom = std::max({std::fabs(a), std::fabs(b), 1e-6});
  return std::fabs(a - b) / denom;
}

// Compares tape gradients in `param.grad()` (already populated by one
// backward pass) against central differences of `forward`.
inline Report check_grad(moescope::nd::Tensor& param,
                         const std::function<double()>& forward, double h = 1e-5,
                         int max_coords = 64, std::uint64_t pick_seed = 7) {
  using moescope::RandomStream;
  Report rep;
  const auto n = param.numel();
  const auto& g = param.grad_const();
  std::vector<std::int64_t> coords;
  if (n <= max_coords) {
    for (std::int64_t i = 0; i < n; ++i) coords.push_back(i);
  } else {
    RandomStream rs(pick_seed);
    for (int i = 0; i < max_coords; ++i) {
      coords.push_back(static_cast<std::int64_t>(rs.bits(static_cast<std::uint64_t>(i)) % static_cast<std::uint64_t>(n)));
    }
  }
  for (auto i : coords) {
    const double saved = param.data()[i];
    param.data()[i] = saved + h;
    const double up = forward();
    param.data()[i] = saved - h;
    const double dn = forward();
    param.data()[i] = saved;
    const double fdg = (up - dn) / (2.0 * h);
    rep.max_rel_err = std::max(rep.max_rel_err, rel_err(g[static_cast<std::size_t>(i)], fdg));
    ++rep.checked;
  }
  return rep;
}

}  // namespace fd
