#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "moescope/ops.hpp"
#include "moescope/rng.hpp"
#include "moescope/tensor.hpp"

namespace moescope {

struct MoeConfig {
  int num_experts = 4;
  int top_k = 2;
  int base_width = 64;  // 256 reproduces the reference widths (128/90/64)
  int input_size = 32;
  int shared_blocks = 3;
  int expert_blocks = 2;
  int proj_dim = 128;
  int gate_channels = 16;
  bool noise_enabled = true;

  // floor(base_width / sqrt(E)); the expert width and readout dimension.
  int embed_dim() const;
  // Spatial side of the feature map entering the gate (input halved once
  // per shared block) and leaving the last expert block.
  int gating_spatial() const;
  int expert_spatial() const;

  void validate() const;
  std::string to_json() const;
  static MoeConfig from_json(const std::string& text);

  bool operator==(const MoeConfig&) const = default;
};

// One backbone block: stride-2 3x3 conv -> BN -> residual 3x3 conv (stride 1)
// added before the ReLU.
struct ConvBlock {
  nd::Tensor w, b;          // stride-2 conv
  nd::Tensor res_w, res_b;  // residual conv on the block output width
  nd::Tensor gamma, beta;
  nd::BnState bn;
};

// Gate branch: 3x3 conv -> BN -> ReLU -> GAP -> FC to E logits. The two
// branches share this architecture, never parameters.
struct GateBranch {
  nd::Tensor conv_w, conv_b;
  nd::Tensor gamma, beta;
  nd::BnState bn;
  nd::Tensor fc_w, fc_b;
};

struct Expert {
  std::vector<ConvBlock> blocks;
  // three-layer MLP readout: flatten -> 2C -> 2C -> C
  nd::Tensor r1_w, r1_b, r2_w, r2_b, r3_w, r3_b;
};

struct ProjectionHead {
  nd::Tensor w1, b1;
  nd::Tensor gamma, beta;
  nd::BnState bn;
  nd::Tensor w2, b2;
};

// Per-image routing decision.
struct GateDecision {
  std::vector<double> logits;   // deterministic branch output, length E
  std::vector<double> noisy;    // scores actually ranked (== logits in eval)
  std::vector<int> selected;    // ascending expert indices, size k
  std::vector<double> weights;  // length E; zero exactly off-support
};

// Per-image forward result.
struct ForwardOutput {
  std::vector<double> embedding;                     // z, length embed_dim
  std::vector<double> projected;                     // v; filled in train mode only
  GateDecision gate;
  std::vector<std::vector<double>> expert_readouts;  // E entries when forced, else empty
  std::vector<double> readout_norms;                 // E entries when forced
};

// Tape-connected batch forward for the training loop.
struct TrainForward {
  nd::Tensor embedding;     // [B, embed_dim]
  nd::Tensor projected;     // [B, proj_dim]
  nd::Tensor gate_weights;  // [B, E], sparse rows
  std::vector<std::vector<int>> selected;
};

class MoeModel {
 public:
  static MoeModel init(const MoeConfig& cfg, std::uint64_t seed);

  const MoeConfig& config() const { return cfg_; }

  // Trainable tensors in a fixed visit order (also the init order).
  void visit_params(const std::function<void(const std::string&, nd::Tensor&)>& fn);
  // Non-trainable persistent state (batchnorm running statistics).
  void visit_state(const std::function<void(const std::string&, nd::Tensor&)>& fn);
  std::int64_t param_count();

  // Shared prefix: images [B,3,S,S] -> latent [B,C,gs,gs].
  nd::Tensor shared_forward(const nd::Tensor& images, nd::Mode mode, nd::Tape* tape = nullptr);

  // One gate branch on the latent: [B,C,gs,gs] -> logits [B,E].
  nd::Tensor gate_branch(const nd::Tensor& h, GateBranch& branch, nd::Mode mode,
                         nd::Tape* tape = nullptr);

  GateBranch& gate_g() { return gate_g_; }
  GateBranch& gate_n() { return gate_n_; }

  // Expert path: latent rows -> readout [n, embed_dim].
  nd::Tensor expert_forward(const nd::Tensor& h, int expert_index, nd::Mode mode,
                            nd::Tape* tape = nullptr);

  // Projection head, training-time only consumer.
  nd::Tensor project(const nd::Tensor& z, nd::Mode mode, nd::Tape* tape = nullptr);

  // Full forward producing per-image outputs. Forced mode runs every expert
  // on every image and records readouts plus their norms.
  std::vector<ForwardOutput> forward(const nd::Tensor& images, nd::Mode mode,
                                     bool force_all_experts, std::uint64_t noise_seed = 0);

  // Batch forward on a tape for optimization. Noise draws come from a
  // counter-based stream keyed by (noise_seed, row, expert). Eval mode uses
  // running statistics and noiseless scores (validation loss path).
  TrainForward train_forward(const nd::Tensor& views, nd::Tape& tape, std::uint64_t noise_seed,
                             nd::Mode mode = nd::Mode::kTrain);

  void save(std::ostream& os, const std::string& extra_json = "{}");
  static MoeModel load(std::istream& is, std::string* extra_json = nullptr);

 private:
  MoeModel() = default;
  MoeConfig cfg_;
  std::vector<ConvBlock> shared_;
  GateBranch gate_g_, gate_n_;
  std::vector<Expert> experts_;
  ProjectionHead proj_;

  nd::Tensor block_forward(ConvBlock& blk, const nd::Tensor& x, nd::Mode mode, nd::Tape* tape);
};

// Spec-level gate: ranks lg (+ noise scaled by softplus(ln) in train mode),
// keeps the top k, masked-softmaxes the kept scores. Ties break toward the
// lower index.
GateDecision noisy_topk_gate(std::span<const double> logits_g, std::span<const double> logits_n,
                             int k, nd::Mode mode, const RandomStream& noise,
                             std::uint64_t row = 0);

// z = sum over selected experts of weight_i * readout_i. `readouts` is
// indexed by expert; an empty entry for a selected expert is an error.
std::vector<double> combine(const std::vector<std::vector<double>>& readouts,
                            const GateDecision& decision);

// --- checkpoint file ------------------------------------------------------
// "MOEK" u32 version, u64 json length, config+extra json, u64 tensor count,
// then (u32 name length, name, NDT1 blob) per named tensor.
void write_checkpoint(std::ostream& os, MoeModel& model, const std::string& extra_json);
MoeModel read_checkpoint(std::istream& is, std::string* extra_json = nullptr);

}  // namespace moescope
