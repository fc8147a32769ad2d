#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "moescope/augment.hpp"
#include "moescope/cluster.hpp"
#include "moescope/corpus.hpp"
#include "moescope/lasso.hpp"
#include "moescope/model.hpp"

namespace moescope::probe {

// Per-image, per-expert measurements from a forced (router-bypassing) pass.
struct ProbeRecord {
  int image_id = 0;
  std::int64_t label = -1;
  std::vector<double> gate_logits;            // length E
  std::vector<double> gate_weights;           // length E, zero off-support
  std::vector<int> selected;                  // k ascending indices
  std::vector<std::vector<double>> readouts;  // E x embed_dim
  std::vector<double> norms;                  // E readout L2 norms
};

// Eval-mode pass over the whole corpus with every expert forced. Inputs
// are normalized with the corpus statistics (or `aug`'s, when given).
std::vector<ProbeRecord> collect(MoeModel& model, const Corpus& corpus,
                                 const AugmentConfig* aug = nullptr);

struct RoutingStats {
  std::vector<std::int64_t> class_ids;         // matrix row order
  nd::Tensor proportions;                      // [C,E]: share of class in expert's top-k
  nd::Tensor weight_mass;                      // [C,E]: mean gate weight (flag variant)
  std::vector<std::vector<int>> top_images;    // per expert: image ids by raw gate logit
};
RoutingStats routing_stats(const std::vector<ProbeRecord>& records, int top_m = 3);

// Fraction of images whose two augmented views select identical expert sets
// (eval-mode routing). max_images = 0 probes the full corpus; aug defaults
// to the corpus-derived training augmentation.
double topk_agreement(MoeModel& model, const Corpus& corpus, std::uint64_t seed,
                      std::int64_t max_images = 0, const AugmentConfig* aug = nullptr);

// Image ids ranked by this expert's readout norm, descending; ties by id.
std::vector<int> mei_topn(const std::vector<ProbeRecord>& records, int expert, int n);

// Pairwise Euclidean distances between embedding rows.
DissimilarityMatrix rdm(const nd::Tensor& embeddings);

struct RsaResult {
  nd::Tensor similarity;                        // [m,m] spearman r_s, unit diagonal
  std::vector<std::pair<int, int>> undefined;   // pairs with a constant triangle
};
RsaResult second_order_rsa(const std::vector<DissimilarityMatrix>& rdms);

struct SeparabilityResult {
  std::vector<std::int64_t> class_ids;
  nd::Tensor matrix;  // [C,C] balanced accuracy, NaN diagonal
};
SeparabilityResult pairwise_separability(const std::vector<ProbeRecord>& records, int expert,
                                         std::uint64_t seed, int folds = 5, double c = 1.0);

struct GatingVsReadout {
  std::vector<double> gating;   // min-max normalized logits
  std::vector<double> readout;  // min-max normalized norms
  std::vector<std::int64_t> labels;
  double pearson_r = 0.0;
};
GatingVsReadout gating_vs_readout(const std::vector<ProbeRecord>& records, int expert);

struct LassoReportRow {
  int expert = 0;
  std::string target;  // "gating" or "readout"
  double r2_mean = 0.0;
  double r2_std = 0.0;
  std::vector<double> coefficients;
  double intercept = 0.0;
  double lambda = 0.0;
  std::vector<std::pair<std::string, double>> top;  // top-m (name, weight), descending
  int flagged_folds = 0;
};
LassoReportRow lasso_regress(const std::vector<ProbeRecord>& records, const Corpus& corpus,
                             int expert, bool readout_target, std::uint64_t seed, int top_m = 3);

struct StabilityReport {
  std::vector<std::pair<int, int>> items;  // (model, expert)
  nd::Tensor similarity;                   // second-order r_s matrix
  int chosen_clusters = 1;
  std::vector<int> assignments;
  std::vector<std::pair<int, double>> silhouette_curve;
  nd::Tensor mds_coords;  // [m,2]
  bool degenerate = false;
  bool mds_clamped = false;
  // per cluster: exemplar members as indices into `items`, and their MEI ids
  std::vector<std::vector<int>> exemplar_members;
  std::vector<std::vector<std::vector<int>>> exemplar_meis;
};

// Clustering/silhouette/MDS over a precomputed second-order similarity
// matrix (distance = 1 - r_s).
StabilityReport cluster_stability(const nd::Tensor& similarity, int k_min = 2, int k_max = 15);

// Full stability pipeline over several trained models: forced readouts on a
// reference subset, first-order RDMs, second-order RSA, clustering,
// silhouette selection, MDS, and per-cluster exemplar MEIs.
StabilityReport stability_analysis(std::vector<MoeModel>& models, const Corpus& corpus,
                                   std::int64_t max_reference_images = 512,
                                   int exemplars_per_cluster = 5, int meis_per_exemplar = 10);

}  // namespace moescope::probe
