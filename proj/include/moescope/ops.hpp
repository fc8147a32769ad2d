#pragma once

#include <span>
#include <vector>

#include "moescope/tensor.hpp"

namespace moescope::nd {

enum class Mode { kTrain, kEval };

// --- elementwise ---------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor sub(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor mul(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor divide(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor add_scalar(const Tensor& a, double c, Tape* tape = nullptr);
Tensor mul_scalar(const Tensor& a, double c, Tape* tape = nullptr);
Tensor relu(const Tensor& x, Tape* tape = nullptr);
Tensor softplus(const Tensor& x, Tape* tape = nullptr);
Tensor sqrt_ew(const Tensor& x, Tape* tape = nullptr);
Tensor reciprocal(const Tensor& x, Tape* tape = nullptr);

double softplus_scalar(double x);
double sigmoid_scalar(double x);

// --- structure -----------------------------------------------------------
Tensor reshape(const Tensor& x, Shape new_shape, Tape* tape = nullptr);
// out[i] = x[idx[i]] along axis 0; idx entries may repeat.
Tensor gather_rows(const Tensor& x, const std::vector<int>& idx, Tape* tape = nullptr);
// out has `out_rows` rows; out[idx[i]] += x[i]. Duplicates accumulate.
Tensor scatter_rows(const Tensor& x, const std::vector<int>& idx, std::int64_t out_rows,
                    Tape* tape = nullptr);
Tensor select_column(const Tensor& x, std::int64_t col, Tape* tape = nullptr);
// out[i,:] = x[i,:] * s[i]
Tensor rowwise_scale(const Tensor& x, const Tensor& s, Tape* tape = nullptr);

// --- neural-net primitives -------------------------------------------------
// Cross-correlation (no kernel flip): input [B,Cin,H,W], weight
// [Cout,Cin,kh,kw] with kh,kw odd, bias [Cout].
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int padding, Tape* tape = nullptr);

struct BnState {
  Tensor running_mean;
  Tensor running_var;
  bool initialized = false;
};

// Normalizes over all axes except axis 1. Accepts [B,C,H,W] or [B,C].
// Train mode uses biased batch variance and folds it into the running
// statistics with `momentum` (first train call seeds them directly).
Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BnState& state,
                 Mode mode, double momentum = 0.1, double eps = 1e-5, Tape* tape = nullptr);

// Global average pooling: [B,C,H,W] -> [B,C].
Tensor gap(const Tensor& x, Tape* tape = nullptr);

// x [B,n], w [m,n], b [m] -> [B,m]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b, Tape* tape = nullptr);

// --- reductions ------------------------------------------------------------
Tensor sum_all(const Tensor& x, Tape* tape = nullptr);
Tensor mean_all(const Tensor& x, Tape* tape = nullptr);
Tensor sum_rows(const Tensor& x, Tape* tape = nullptr);    // [B,m] -> [B]
Tensor column_sum(const Tensor& x, Tape* tape = nullptr);  // [B,m] -> [m]

// --- softmax / top-k ---------------------------------------------------------
// Entries equal to -inf map to exactly 0; finite entries get a max-shifted
// softmax. Rank-1 [n] or rank-2 [B,n] row-wise. Throws NumericError when a
// row has no finite entry.
Tensor softmax_masked(const Tensor& x, Tape* tape = nullptr);

// Keeps the k largest entries of each row, sets the rest to -inf. Exact
// value ties break toward the lower index. Optionally reports the selected
// index sets (ascending order).
Tensor keep_topk_rows(const Tensor& x, int k, Tape* tape = nullptr,
                      std::vector<std::vector<int>>* selected = nullptr);

// Selection helper shared with analysis code.
std::vector<int> topk_indices(std::span<const double> v, int k);

// --- contrastive helpers ------------------------------------------------------
Tensor gram(const Tensor& x, Tape* tape = nullptr);  // [n,d] -> X X^T [n,n]
// out[i] = s[i, partner[i]]
Tensor gather_pairs(const Tensor& s, const std::vector<int>& partner, Tape* tape = nullptr);
// Per-row logsumexp excluding the diagonal entry. [n,n] -> [n], n >= 2.
Tensor logsumexp_offdiag_rows(const Tensor& s, Tape* tape = nullptr);

double l2norm(std::span<const double> x);

}  // namespace moescope::nd
