#pragma once

#include <span>
#include <vector>

#include "moescope/ops.hpp"
#include "moescope/tensor.hpp"

namespace moescope {

struct LossConfig {
  double temperature = 0.5;
  double importance_weight = 0.1;
  void validate() const;
};

// Streaming per-expert gate-weight totals (Eq.-style importance over a batch).
class ImportanceAccumulator {
 public:
  explicit ImportanceAccumulator(int num_experts)
      : totals_(static_cast<std::size_t>(num_experts), 0.0) {}
  void add(std::span<const double> gate_weights);
  const std::vector<double>& totals() const { return totals_; }
  double sum() const;

 private:
  std::vector<double> totals_;
};

// NT-Xent over 2N projected rows where rows 2j and 2j+1 are the two views of
// origin j. Cosine similarities on L2-normalized rows, temperature tau, the
// standard symmetric formulation with all 2N rows serving as anchors.
nd::Tensor nt_xent(const nd::Tensor& projected, double tau, nd::Tape* tape = nullptr);

// weight * (population std / mean)^2 over per-expert importance totals.
nd::Tensor importance_loss(const nd::Tensor& importance, double weight, nd::Tape* tape = nullptr);

struct TotalLoss {
  nd::Tensor total;
  nd::Tensor contrastive;
  nd::Tensor importance;
};

TotalLoss total_loss(const nd::Tensor& projected, const nd::Tensor& importance,
                     const LossConfig& cfg, nd::Tape* tape = nullptr);

}  // namespace moescope
