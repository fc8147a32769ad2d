#pragma once

#include <vector>

#include "moescope/cluster.hpp"
#include "moescope/tensor.hpp"

namespace moescope {

struct MdsResult {
  nd::Tensor coords;  // [n,2], centered; column sign fixed for reproducibility
  std::vector<double> eigenvalues;  // the two used, descending
  bool clamped_negative = false;
};

// Classical MDS: double-center the squared-distance matrix and embed with
// the top-2 eigenpairs. Negative eigenvalues clamp to 0 with a warning flag.
MdsResult mds_2d(const DissimilarityMatrix& dist);

}  // namespace moescope
