#include "moescope/cluster.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace moescope {

using nd::Tensor;

void DissimilarityMatrix::validate() const {
  if (m.rank() != 2 || m.dim(0) != m.dim(1)) {
    throw ShapeError("dissimilarity: expected a square matrix, got " + nd::shape_str(m.shape()));
  }
  const auto n = m.dim(0);
  for (std::int64_t i = 0; i < n; ++i) {
    if (m.data()[i * n + i] != 0.0) {
      throw ValidationError("dissimilarity: nonzero diagonal at " + std::to_string(i));
    }
    for (std::int64_t j = i + 1; j < n; ++j) {
      const double a = m.data()[i * n + j];
      const double b = m.data()[j * n + i];
      if (a < 0.0 || std::fabs(a - b) > 1e-12) {
        throw ValidationError("dissimilarity: asymmetric or negative entry at (" +
                              std::to_string(i) + "," + std::to_string(j) + ")");
      }
    }
  }
}

DissimilarityMatrix DissimilarityMatrix::from(Tensor m) {
  DissimilarityMatrix d{std::move(m)};
  d.validate();
  return d;
}

std::vector<double> DissimilarityMatrix::upper_triangle() const {
  const auto n = size();
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = i + 1; j < n; ++j) v.push_back(at(i, j));
  }
  return v;
}

namespace {

struct MergeSequence {
  // parent pointers after each merge step; replayed to produce cuts
  std::vector<std::pair<int, int>> merges;  // merged (a, b) with a < b
};

MergeSequence run_average_linkage(const DissimilarityMatrix& dist) {
  const auto n = static_cast<int>(dist.size());
  std::vector<std::vector<double>> d(static_cast<std::size_t>(n),
                                     std::vector<double>(static_cast<std::size_t>(n), 0.0));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) d[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = dist.at(i, j);
  }
  std::vector<bool> active(static_cast<std::size_t>(n), true);
  std::vector<int> size(static_cast<std::size_t>(n), 1);
  MergeSequence seq;
  for (int step = 0; step < n - 1; ++step) {
    double best = std::numeric_limits<double>::infinity();
    int bi = -1, bj = -1;
    for (int i = 0; i < n; ++i) {
      if (!active[static_cast<std::size_t>(i)]) continue;
      for (int j = i + 1; j < n; ++j) {
        if (!active[static_cast<std::size_t>(j)]) continue;
        const double v = d[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        if (v < best) {
          best = v;
          bi = i;
          bj = j;
        }
      }
    }
    // Lance-Williams update for average linkage into slot bi
    for (int c = 0; c < n; ++c) {
      if (!active[static_cast<std::size_t>(c)] || c == bi || c == bj) continue;
      const double na = size[static_cast<std::size_t>(bi)];
      const double nb = size[static_cast<std::size_t>(bj)];
      const double v = (na * d[static_cast<std::size_t>(bi)][static_cast<std::size_t>(c)] +
                        nb * d[static_cast<std::size_t>(bj)][static_cast<std::size_t>(c)]) /
                       (na + nb);
      d[static_cast<std::size_t>(bi)][static_cast<std::size_t>(c)] = v;
      d[static_cast<std::size_t>(c)][static_cast<std::size_t>(bi)] = v;
    }
    size[static_cast<std::size_t>(bi)] += size[static_cast<std::size_t>(bj)];
    active[static_cast<std::size_t>(bj)] = false;
    seq.merges.emplace_back(bi, bj);
  }
  return seq;
}

std::vector<int> cut_assignments(const MergeSequence& seq, int n, int k) {
  std::vector<int> parent(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) parent[static_cast<std::size_t>(i)] = i;
  std::function<int(int)> find = [&](int a) {
    while (parent[static_cast<std::size_t>(a)] != a) {
      parent[static_cast<std::size_t>(a)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(a)])];
      a = parent[static_cast<std::size_t>(a)];
    }
    return a;
  };
  for (int s = 0; s < n - k; ++s) {
    const auto [a, b] = seq.merges[static_cast<std::size_t>(s)];
    parent[static_cast<std::size_t>(find(b))] = find(a);
  }
  std::vector<int> label(static_cast<std::size_t>(n), -1);
  std::vector<int> out(static_cast<std::size_t>(n));
  int next = 0;
  for (int i = 0; i < n; ++i) {
    const int root = find(i);
    if (label[static_cast<std::size_t>(root)] < 0) label[static_cast<std::size_t>(root)] = next++;
    out[static_cast<std::size_t>(i)] = label[static_cast<std::size_t>(root)];
  }
  return out;
}

}  // namespace

std::vector<int> agglomerative_average(const DissimilarityMatrix& dist, int k) {
  const auto n = static_cast<int>(dist.size());
  if (k < 1 || k > n) throw ValidationError("clustering: k out of range");
  const auto seq = run_average_linkage(dist);
  return cut_assignments(seq, n, k);
}

double silhouette(const DissimilarityMatrix& dist, std::span<const int> assignment) {
  const auto n = dist.size();
  if (static_cast<std::size_t>(n) != assignment.size()) {
    throw ShapeError("silhouette: assignment length mismatch");
  }
  int k = 0;
  for (int a : assignment) k = std::max(k, a + 1);
  std::vector<std::int64_t> counts(static_cast<std::size_t>(k), 0);
  for (int a : assignment) ++counts[static_cast<std::size_t>(a)];

  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const int ci = assignment[static_cast<std::size_t>(i)];
    if (counts[static_cast<std::size_t>(ci)] <= 1) continue;  // singleton contributes 0
    std::vector<double> sums(static_cast<std::size_t>(k), 0.0);
    for (std::int64_t j = 0; j < n; ++j) {
      if (j == i) continue;
      sums[static_cast<std::size_t>(assignment[static_cast<std::size_t>(j)])] += dist.at(i, j);
    }
    const double a = sums[static_cast<std::size_t>(ci)] /
                     static_cast<double>(counts[static_cast<std::size_t>(ci)] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c) {
      if (c == ci || counts[static_cast<std::size_t>(c)] == 0) continue;
      b = std::min(b, sums[static_cast<std::size_t>(c)] / static_cast<double>(counts[static_cast<std::size_t>(c)]));
    }
    if (!std::isfinite(b)) continue;  // single cluster overall
    const double denom = std::max(a, b);
    acc += denom > 0.0 ? (b - a) / denom : 0.0;
  }
  return acc / static_cast<double>(n);
}

ClusterSelection select_clusters(const DissimilarityMatrix& dist, int k_min, int k_max) {
  dist.validate();
  const auto n = static_cast<int>(dist.size());
  if (n < 3) throw ValidationError("cluster selection: need at least 3 items, got " + std::to_string(n));
  if (k_min < 2) throw ValidationError("cluster selection: smallest candidate count must be >= 2");
  k_max = std::min(k_max, n - 1);
  if (k_max < k_min) {
    throw ValidationError("cluster selection: fewer items than the smallest candidate count");
  }

  ClusterSelection sel;
  double maxd = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = i + 1; j < n; ++j) maxd = std::max(maxd, dist.at(i, j));
  }
  if (maxd < 1e-12) {
    sel.degenerate = true;  // all items identical: a single cluster, reported with a warning
    sel.chosen = 1;
    sel.assignments.assign(static_cast<std::size_t>(n), 0);
    return sel;
  }

  const auto seq = run_average_linkage(dist);
  double best = -2.0;
  for (int k = k_min; k <= k_max; ++k) {
    const auto assign = cut_assignments(seq, n, k);
    const double s = silhouette(dist, assign);
    sel.curve.emplace_back(k, s);
    if (s > best) {
      best = s;
      sel.chosen = k;
      sel.assignments = assign;
    }
  }
  return sel;
}

}  // namespace moescope
