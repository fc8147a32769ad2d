#include "moescope/losses.hpp"

#include <cmath>
#include <string>

namespace moescope {

using nd::Tape;
using nd::Tensor;

void LossConfig::validate() const {
  if (!(temperature > 0.0)) throw ValidationError("loss config: temperature must be positive");
  if (importance_weight < 0.0) throw ValidationError("loss config: importance weight must be >= 0");
}

void ImportanceAccumulator::add(std::span<const double> gate_weights) {
  if (gate_weights.size() != totals_.size()) {
    throw ShapeError("importance: weight vector length " + std::to_string(gate_weights.size()) +
                     " != expert count " + std::to_string(totals_.size()));
  }
  for (std::size_t i = 0; i < totals_.size(); ++i) totals_[i] += gate_weights[i];
}

double ImportanceAccumulator::sum() const {
  double s = 0.0;
  for (double v : totals_) s += v;
  return s;
}

Tensor nt_xent(const Tensor& projected, double tau, Tape* tape) {
  if (!(tau > 0.0)) throw ValidationError("nt_xent: temperature must be positive");
  if (projected.rank() != 2) {
    throw ShapeError("nt_xent: expected [2N,d], got " + nd::shape_str(projected.shape()));
  }
  const auto rows = projected.dim(0);
  if (rows % 2 != 0 || rows < 4) {
    throw ValidationError("nt_xent: need an even number of rows and N >= 2 origins, got " +
                          std::to_string(rows) + " rows");
  }
  Tensor sq = nd::mul(projected, projected, tape);
  Tensor norms = nd::sqrt_ew(nd::sum_rows(sq, tape), tape);
  for (std::int64_t i = 0; i < norms.numel(); ++i) {
    if (norms.data()[i] < 1e-150) {
      throw NumericError("nt_xent: zero-norm row " + std::to_string(i) +
                         " cannot be normalized");
    }
  }
  Tensor unit = nd::rowwise_scale(projected, nd::reciprocal(norms, tape), tape);
  Tensor sims = nd::mul_scalar(nd::gram(unit, tape), 1.0 / tau, tape);

  std::vector<int> partner(static_cast<std::size_t>(rows));
  for (std::int64_t i = 0; i < rows; ++i) {
    partner[static_cast<std::size_t>(i)] = static_cast<int>(i ^ 1);
  }
  Tensor lse = nd::logsumexp_offdiag_rows(sims, tape);
  Tensor pos = nd::gather_pairs(sims, partner, tape);
  return nd::mean_all(nd::sub(lse, pos, tape), tape);
}

Tensor importance_loss(const Tensor& importance, double weight, Tape* tape) {
  if (importance.rank() != 1) {
    throw ShapeError("importance_loss: expected a vector, got " +
                     nd::shape_str(importance.shape()));
  }
  const auto e = importance.numel();
  double sum = 0.0;
  for (std::int64_t i = 0; i < e; ++i) sum += importance.data()[i];
  if (!(sum > 0.0)) {
    throw NumericError("importance_loss: degenerate mean (importance sums to " +
                       std::to_string(sum) + ")");
  }
  // CV^2 = E * sum(I^2) / sum(I)^2 - 1 with the population variance.
  Tensor s1 = nd::sum_all(importance, tape);
  Tensor s2 = nd::sum_all(nd::mul(importance, importance, tape), tape);
  Tensor cv2 = nd::add_scalar(
      nd::mul_scalar(nd::divide(s2, nd::mul(s1, s1, tape), tape), static_cast<double>(e), tape),
      -1.0, tape);
  return nd::mul_scalar(cv2, weight, tape);
}

TotalLoss total_loss(const Tensor& projected, const Tensor& importance, const LossConfig& cfg,
                     Tape* tape) {
  cfg.validate();
  TotalLoss out;
  out.contrastive = nt_xent(projected, cfg.temperature, tape);
  out.importance = importance_loss(importance, cfg.importance_weight, tape);
  out.total = nd::add(out.contrastive, out.importance, tape);
  return out;
}

}  // namespace moescope
