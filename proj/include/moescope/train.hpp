#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "moescope/corpus.hpp"
#include "moescope/losses.hpp"
#include "moescope/model.hpp"

namespace moescope {

struct TrainConfig {
  int epochs = 20;
  int batch_size = 128;  // augmented view rows per step, two per origin image
  double lr = 3e-4;
  double weight_decay = 1e-5;
  double min_lr = 1e-6;
  double clip_norm = 1.0;
  std::uint64_t seed = 1;
  double val_fraction = 0.1;
  int keep_top = 3;
  LossConfig loss;
  void validate() const;
};

// Cosine annealing from lr0 at step 0 to min_lr at step == total_steps.
double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr0, double min_lr);

// Global-norm gradient clipping over a parameter set; returns the pre-clip
// norm. Gradients are rescaled in place when the norm exceeds max_norm.
double clip_global_norm(const std::vector<nd::Tensor*>& params, double max_norm);

class Adam {
 public:
  explicit Adam(double weight_decay = 0.0, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}
  // Applies one update using each tensor's accumulated gradient.
  // The params list must keep a stable order across calls.
  void step(const std::vector<nd::Tensor*>& params, double lr);

 private:
  double wd_, b1_, b2_, eps_;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct StepLog {
  int epoch;
  std::int64_t step;
  double lr;
  double nt_xent;
  double importance;
  double total;
};

struct EpochLog {
  int epoch;
  double val_nt_xent;
  double val_importance;
  double val_total;
  double top2_agreement;
  double min_route_share;
};

struct TrainResult {
  std::vector<StepLog> steps;
  std::vector<EpochLog> epochs;
  std::vector<std::filesystem::path> kept_checkpoints;  // best-first by validation loss
  std::filesystem::path final_checkpoint;
};

struct FoldSplit {
  std::vector<int> train_idx;
  std::vector<int> test_idx;
};

// Disjoint folds covering all indices, sizes differing by at most one.
std::vector<FoldSplit> kfold_split(int n, int k, std::uint64_t seed);

// Full contrastive training run: Adam with weight decay, cosine-annealed
// learning rate, global-norm clipping, NT-Xent + importance loss, top-k
// checkpoint retention by validation loss plus the final model. Writes
// loss.csv, val.csv and checkpoints into out_dir. `start_epoch` continues
// the cosine schedule from a resumed checkpoint.
TrainResult train(MoeModel& model, const Corpus& corpus, const TrainConfig& cfg,
                  const std::filesystem::path& out_dir, int start_epoch = 0);

// Validation-style loss on prepared view rows (eval statistics, no noise).
TotalLoss eval_batch_loss(MoeModel& model, const nd::Tensor& views, const LossConfig& cfg);

}  // namespace moescope
