#pragma once

#include <span>
#include <utility>
#include <vector>

#include "moescope/tensor.hpp"

namespace moescope {

// Symmetric matrix with a zero diagonal; first-order RDMs and second-order
// expert distances both live here.
struct DissimilarityMatrix {
  nd::Tensor m;  // [n,n]
  std::int64_t size() const { return m.rank() == 2 ? m.dim(0) : 0; }
  double at(std::int64_t i, std::int64_t j) const { return m.data()[i * size() + j]; }
  void validate() const;
  static DissimilarityMatrix from(nd::Tensor m);
  // Strict upper triangle (i < j), row-major.
  std::vector<double> upper_triangle() const;
};

// Average-linkage agglomerative clustering cut at k clusters. Assignments
// are relabeled to 0..k-1 in order of first appearance. Merge ties break
// toward the lexicographically smallest active pair.
std::vector<int> agglomerative_average(const DissimilarityMatrix& dist, int k);

// Mean silhouette over items with precomputed distances; a singleton
// cluster contributes 0 by convention.
double silhouette(const DissimilarityMatrix& dist, std::span<const int> assignment);

struct ClusterSelection {
  int chosen = 1;
  std::vector<int> assignments;
  std::vector<std::pair<int, double>> curve;  // (count, mean silhouette)
  bool degenerate = false;                    // all items coincide
};

// Cuts the dendrogram at every count in [k_min, min(k_max, n-1)], scores
// each cut, and keeps the maximizer (lowest count on ties).
ClusterSelection select_clusters(const DissimilarityMatrix& dist, int k_min = 2, int k_max = 15);

}  // namespace moescope
