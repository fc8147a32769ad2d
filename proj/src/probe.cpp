#include "moescope/probe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include "moescope/augment.hpp"
#include "moescope/logistic.hpp"
#include "moescope/mds.hpp"
#include "moescope/stats.hpp"

namespace moescope::probe {

using nd::Mode;
using nd::Shape;
using nd::Tensor;

// Inference preprocessing: per-channel normalization with the corpus
// statistics, no augmentation. Models only ever see normalized inputs.
Tensor normalized_batch(const Corpus& corpus, const std::vector<int>& idx,
                        const AugmentConfig& aug) {
  const int s = corpus.image_size();
  Tensor imgs = nd::reshape(nd::gather_rows(corpus.images, idx),
                            {static_cast<std::int64_t>(idx.size()), 3, s, s});
  const auto plane = static_cast<std::int64_t>(s) * s;
  for (std::int64_t i = 0; i < imgs.dim(0); ++i) {
    for (int ch = 0; ch < 3; ++ch) {
      const double m = aug.norm_mean[static_cast<std::size_t>(ch)];
      const double sd = aug.norm_std[static_cast<std::size_t>(ch)];
      double* p = imgs.data() + (i * 3 + ch) * plane;
      for (std::int64_t q = 0; q < plane; ++q) p[q] = (p[q] - m) / sd;
    }
  }
  return imgs;
}

std::vector<ProbeRecord> collect(MoeModel& model, const Corpus& corpus,
                                 const AugmentConfig* aug_override) {
  corpus.validate();
  const auto n = corpus.size();
  const AugmentConfig aug = aug_override ? *aug_override : AugmentConfig::for_corpus(corpus);
  std::vector<ProbeRecord> records;
  records.reserve(static_cast<std::size_t>(n));
  const std::int64_t chunk = 128;
  for (std::int64_t at = 0; at < n; at += chunk) {
    const auto count = std::min(chunk, n - at);
    std::vector<int> idx(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) idx[static_cast<std::size_t>(i)] = static_cast<int>(at + i);
    Tensor imgs = normalized_batch(corpus, idx, aug);
    auto outs = model.forward(imgs, Mode::kEval, /*force_all_experts=*/true);
    for (std::int64_t i = 0; i < count; ++i) {
      auto& fo = outs[static_cast<std::size_t>(i)];
      ProbeRecord r;
      r.image_id = static_cast<int>(at + i);
      r.label = corpus.labels[static_cast<std::size_t>(at + i)];
      r.gate_logits = std::move(fo.gate.logits);
      r.gate_weights = std::move(fo.gate.weights);
      r.selected = std::move(fo.gate.selected);
      r.readouts = std::move(fo.expert_readouts);
      r.norms = std::move(fo.readout_norms);
      records.push_back(std::move(r));
    }
  }
  return records;
}

RoutingStats routing_stats(const std::vector<ProbeRecord>& records, int top_m) {
  std::set<std::int64_t> classes;
  for (const auto& r : records) {
    if (r.label >= 0) classes.insert(r.label);
  }
  if (classes.empty()) throw ValidationError("routing_stats: no labeled images");
  const auto e_count = static_cast<int>(records.front().gate_logits.size());

  RoutingStats rs;
  rs.class_ids.assign(classes.begin(), classes.end());
  const auto c_count = static_cast<std::int64_t>(rs.class_ids.size());
  rs.proportions = Tensor(Shape{c_count, e_count});
  rs.weight_mass = Tensor(Shape{c_count, e_count});
  std::map<std::int64_t, std::int64_t> row_of;
  for (std::int64_t i = 0; i < c_count; ++i) row_of[rs.class_ids[static_cast<std::size_t>(i)]] = i;

  std::vector<std::int64_t> class_counts(static_cast<std::size_t>(c_count), 0);
  for (const auto& r : records) {
    if (r.label < 0) continue;
    const auto row = row_of[r.label];
    ++class_counts[static_cast<std::size_t>(row)];
    for (int e : r.selected) rs.proportions.data()[row * e_count + e] += 1.0;
    for (int e = 0; e < e_count; ++e) {
      rs.weight_mass.data()[row * e_count + e] += r.gate_weights[static_cast<std::size_t>(e)];
    }
  }
  for (std::int64_t c = 0; c < c_count; ++c) {
    const auto denom = static_cast<double>(class_counts[static_cast<std::size_t>(c)]);
    for (int e = 0; e < e_count; ++e) {
      rs.proportions.data()[c * e_count + e] /= denom;
      rs.weight_mass.data()[c * e_count + e] /= denom;
    }
  }

  rs.top_images.resize(static_cast<std::size_t>(e_count));
  for (int e = 0; e < e_count; ++e) {
    std::vector<int> order(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      const double va = records[static_cast<std::size_t>(a)].gate_logits[static_cast<std::size_t>(e)];
      const double vb = records[static_cast<std::size_t>(b)].gate_logits[static_cast<std::size_t>(e)];
      if (va != vb) return va > vb;
      return records[static_cast<std::size_t>(a)].image_id < records[static_cast<std::size_t>(b)].image_id;
    });
    const auto m = std::min<std::size_t>(static_cast<std::size_t>(top_m), order.size());
    for (std::size_t i = 0; i < m; ++i) {
      rs.top_images[static_cast<std::size_t>(e)].push_back(records[static_cast<std::size_t>(order[i])].image_id);
    }
  }
  return rs;
}

double topk_agreement(MoeModel& model, const Corpus& corpus, std::uint64_t seed,
                      std::int64_t max_images, const AugmentConfig* aug_override) {
  corpus.validate();
  const auto n = max_images > 0 ? std::min(max_images, corpus.size()) : corpus.size();
  const int s = corpus.image_size();
  const AugmentConfig aug = aug_override ? *aug_override : AugmentConfig::for_corpus(corpus);
  const RandomStream seeds = RandomStream(seed).child(0x61677265ull);

  std::int64_t agree = 0;
  const std::int64_t chunk = 64;
  const auto plane = static_cast<std::int64_t>(3) * s * s;
  for (std::int64_t at = 0; at < n; at += chunk) {
    const auto count = std::min(chunk, n - at);
    Tensor views(Shape{2 * count, 3, s, s});
    for (std::int64_t i = 0; i < count; ++i) {
      Tensor img = nd::reshape(nd::gather_rows(corpus.images, {static_cast<int>(at + i)}), {3, s, s});
      auto [a, b] = augment_pair(img, aug, seeds.bits(static_cast<std::uint64_t>(at + i)));
      std::copy_n(a.data(), plane, views.data() + (2 * i) * plane);
      std::copy_n(b.data(), plane, views.data() + (2 * i + 1) * plane);
    }
    Tensor h = model.shared_forward(views, Mode::kEval);
    Tensor lg = model.gate_branch(h, model.gate_g(), Mode::kEval);
    const int e_count = model.config().num_experts;
    for (std::int64_t i = 0; i < count; ++i) {
      const auto sel_a = nd::topk_indices(
          std::span<const double>(lg.data() + (2 * i) * e_count, static_cast<std::size_t>(e_count)),
          model.config().top_k);
      const auto sel_b = nd::topk_indices(
          std::span<const double>(lg.data() + (2 * i + 1) * e_count, static_cast<std::size_t>(e_count)),
          model.config().top_k);
      if (sel_a == sel_b) ++agree;
    }
  }
  return static_cast<double>(agree) / static_cast<double>(n);
}

std::vector<int> mei_topn(const std::vector<ProbeRecord>& records, int expert, int n) {
  if (records.empty()) throw ValidationError("mei: no records");
  if (n < 0 || static_cast<std::size_t>(n) > records.size()) {
    throw ValidationError("mei: n exceeds record count");
  }
  const auto e_count = static_cast<int>(records.front().norms.size());
  if (expert < 0 || expert >= e_count) throw ValidationError("mei: expert index out of range");
  std::vector<int> order(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const double va = records[static_cast<std::size_t>(a)].norms[static_cast<std::size_t>(expert)];
    const double vb = records[static_cast<std::size_t>(b)].norms[static_cast<std::size_t>(expert)];
    if (va != vb) return va > vb;
    return records[static_cast<std::size_t>(a)].image_id < records[static_cast<std::size_t>(b)].image_id;
  });
  std::vector<int> ids;
  ids.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) ids.push_back(records[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])].image_id);
  return ids;
}

DissimilarityMatrix rdm(const Tensor& embeddings) {
  if (embeddings.rank() != 2 || embeddings.dim(0) < 2) {
    throw ShapeError("rdm: expected [n>=2, d] embeddings, got " + nd::shape_str(embeddings.shape()));
  }
  const auto n = embeddings.dim(0), d = embeddings.dim(1);
  Tensor m(Shape{n, n});
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = i + 1; j < n; ++j) {
      double acc = 0.0;
      const double* a = embeddings.data() + i * d;
      const double* b = embeddings.data() + j * d;
      for (std::int64_t t = 0; t < d; ++t) acc += (a[t] - b[t]) * (a[t] - b[t]);
      const double dist = std::sqrt(acc);
      m.data()[i * n + j] = dist;
      m.data()[j * n + i] = dist;
    }
  }
  return DissimilarityMatrix{std::move(m)};
}

RsaResult second_order_rsa(const std::vector<DissimilarityMatrix>& rdms) {
  if (rdms.size() < 2) throw ValidationError("rsa: need at least 2 RDMs");
  const auto n = rdms.front().size();
  for (const auto& r : rdms) {
    if (r.size() != n) throw ShapeError("rsa: RDM sizes differ");
  }
  const auto m = static_cast<std::int64_t>(rdms.size());
  // rank each upper triangle once, then correlate ranks
  std::vector<std::vector<double>> ranks;
  std::vector<bool> constant;
  for (const auto& r : rdms) {
    auto tri = r.upper_triangle();
    const double first = tri.front();
    bool is_const = true;
    for (double v : tri) {
      if (v != first) {
        is_const = false;
        break;
      }
    }
    constant.push_back(is_const);
    ranks.push_back(stats::average_ranks(tri));
  }
  RsaResult out;
  out.similarity = Tensor(Shape{m, m});
  for (std::int64_t i = 0; i < m; ++i) out.similarity.data()[i * m + i] = 1.0;
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = i + 1; j < m; ++j) {
      double rs;
      if (constant[static_cast<std::size_t>(i)] || constant[static_cast<std::size_t>(j)]) {
        rs = std::numeric_limits<double>::quiet_NaN();
        out.undefined.emplace_back(static_cast<int>(i), static_cast<int>(j));
      } else {
        rs = stats::pearson(ranks[static_cast<std::size_t>(i)], ranks[static_cast<std::size_t>(j)]);
      }
      out.similarity.data()[i * m + j] = rs;
      out.similarity.data()[j * m + i] = rs;
    }
  }
  return out;
}

SeparabilityResult pairwise_separability(const std::vector<ProbeRecord>& records, int expert,
                                         std::uint64_t seed, int folds, double c) {
  std::map<std::int64_t, std::vector<const ProbeRecord*>> by_class;
  for (const auto& r : records) {
    if (r.label >= 0) by_class[r.label].push_back(&r);
  }
  if (by_class.size() < 2) throw ValidationError("separability: need at least 2 labeled classes");
  for (const auto& [cls, rows] : by_class) {
    if (static_cast<int>(rows.size()) < folds) {
      throw ValidationError("separability: class " + std::to_string(cls) + " has " +
                            std::to_string(rows.size()) + " samples, fewer than " +
                            std::to_string(folds) + " folds");
    }
  }
  const auto embed = static_cast<std::int64_t>(records.front().readouts[static_cast<std::size_t>(expert)].size());
  auto features = [&](const std::vector<const ProbeRecord*>& rows) {
    Tensor x(Shape{static_cast<std::int64_t>(rows.size()), embed});
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::copy_n(rows[i]->readouts[static_cast<std::size_t>(expert)].data(), embed,
                  x.data() + static_cast<std::int64_t>(i) * embed);
    }
    return x;
  };

  SeparabilityResult out;
  for (const auto& [cls, rows] : by_class) out.class_ids.push_back(cls);
  const auto cc = static_cast<std::int64_t>(out.class_ids.size());
  out.matrix = Tensor(Shape{cc, cc}, std::numeric_limits<double>::quiet_NaN());
  for (std::int64_t a = 0; a < cc; ++a) {
    for (std::int64_t b = a + 1; b < cc; ++b) {
      const Tensor xa = features(by_class[out.class_ids[static_cast<std::size_t>(a)]]);
      const Tensor xb = features(by_class[out.class_ids[static_cast<std::size_t>(b)]]);
      const double acc = pairwise_balanced_accuracy(
          xa, xb, folds, seed + static_cast<std::uint64_t>(a * 131 + b), c);
      out.matrix.data()[a * cc + b] = acc;
      out.matrix.data()[b * cc + a] = acc;
    }
  }
  return out;
}

GatingVsReadout gating_vs_readout(const std::vector<ProbeRecord>& records, int expert) {
  if (records.size() < 2) throw ValidationError("gating_vs_readout: need at least 2 records");
  GatingVsReadout out;
  std::vector<double> lg, nm;
  for (const auto& r : records) {
    lg.push_back(r.gate_logits[static_cast<std::size_t>(expert)]);
    nm.push_back(r.norms[static_cast<std::size_t>(expert)]);
    out.labels.push_back(r.label);
  }
  auto minmax = [&](std::vector<double>& v, const char* what) {
    const auto [mn_it, mx_it] = std::minmax_element(v.begin(), v.end());
    const double lo = *mn_it, hi = *mx_it;
    if (hi == lo) {
      throw NumericError(std::string("gating_vs_readout: constant ") + what + " series for expert " +
                         std::to_string(expert));
    }
    for (auto& x : v) x = (x - lo) / (hi - lo);
  };
  minmax(lg, "gating-logit");
  minmax(nm, "readout-norm");
  out.pearson_r = stats::pearson(lg, nm);
  out.gating = std::move(lg);
  out.readout = std::move(nm);
  return out;
}

LassoReportRow lasso_regress(const std::vector<ProbeRecord>& records, const Corpus& corpus,
                             int expert, bool readout_target, std::uint64_t seed, int top_m) {
  if (records.size() != static_cast<std::size_t>(corpus.size())) {
    throw ValidationError("lasso_regress: record count does not match corpus");
  }
  std::vector<double> y;
  y.reserve(records.size());
  for (const auto& r : records) {
    y.push_back(readout_target ? r.norms[static_cast<std::size_t>(expert)]
                               : r.gate_logits[static_cast<std::size_t>(expert)]);
  }
  const auto cv = nn_lasso_nested_cv(corpus.factors, y, seed);
  LassoReportRow row;
  row.expert = expert;
  row.target = readout_target ? "readout" : "gating";
  row.r2_mean = cv.r2_mean;
  row.r2_std = cv.r2_std;
  row.coefficients = cv.coefficients;
  row.intercept = cv.intercept;
  row.lambda = cv.lambda_full;
  row.flagged_folds = static_cast<int>(cv.flagged_folds.size());
  std::vector<int> order(cv.coefficients.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (cv.coefficients[static_cast<std::size_t>(a)] != cv.coefficients[static_cast<std::size_t>(b)]) {
      return cv.coefficients[static_cast<std::size_t>(a)] > cv.coefficients[static_cast<std::size_t>(b)];
    }
    return a < b;
  });
  for (int i = 0; i < top_m && i < static_cast<int>(order.size()); ++i) {
    const auto j = static_cast<std::size_t>(order[static_cast<std::size_t>(i)]);
    row.top.emplace_back(corpus.factor_names[j], cv.coefficients[j]);
  }
  return row;
}

StabilityReport cluster_stability(const Tensor& similarity, int k_min, int k_max) {
  if (similarity.rank() != 2 || similarity.dim(0) != similarity.dim(1)) {
    throw ShapeError("stability: similarity must be square");
  }
  const auto m = similarity.dim(0);
  Tensor dist(Shape{m, m});
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < m; ++j) {
      if (i == j) {
        dist.data()[i * m + j] = 0.0;
        continue;
      }
      double s = similarity.data()[i * m + j];
      if (std::isnan(s)) s = 0.0;  // undefined correlations count as unrelated
      dist.data()[i * m + j] = 1.0 - s;
    }
  }
  const auto dm = DissimilarityMatrix{dist};
  StabilityReport rep;
  rep.similarity = similarity;
  const auto sel = select_clusters(dm, k_min, k_max);
  rep.chosen_clusters = sel.chosen;
  rep.assignments = sel.assignments;
  rep.silhouette_curve = sel.curve;
  rep.degenerate = sel.degenerate;
  if (!sel.degenerate) {
    const auto mds = mds_2d(dm);
    rep.mds_coords = mds.coords;
    rep.mds_clamped = mds.clamped_negative;
  } else {
    rep.mds_coords = Tensor(Shape{m, 2});
  }
  return rep;
}

StabilityReport stability_analysis(std::vector<MoeModel>& models, const Corpus& corpus,
                                   std::int64_t max_reference_images, int exemplars_per_cluster,
                                   int meis_per_exemplar) {
  if (models.size() < 2) throw ValidationError("stability: need at least 2 models");
  const auto& cfg0 = models.front().config();
  for (auto& m : models) {
    if (!(m.config() == cfg0)) {
      throw ValidationError("stability: model configs are incompatible across the set");
    }
  }
  corpus.validate();

  // evenly spaced reference subset keeps the first-order RDMs tractable
  const auto total = corpus.size();
  const auto ref_n = std::min(max_reference_images, total);
  std::vector<int> ref(static_cast<std::size_t>(ref_n));
  for (std::int64_t i = 0; i < ref_n; ++i) {
    ref[static_cast<std::size_t>(i)] = static_cast<int>(i * total / ref_n);
  }
  Corpus sub;
  sub.images = nd::gather_rows(corpus.images, ref);
  for (int i : ref) {
    sub.labels.push_back(corpus.labels[static_cast<std::size_t>(i)]);
    sub.names.push_back(corpus.names[static_cast<std::size_t>(i)]);
  }
  sub.factors = nd::gather_rows(corpus.factors, ref);
  sub.factor_names = corpus.factor_names;

  const int e_count = cfg0.num_experts;
  const int embed = cfg0.embed_dim();
  const AugmentConfig full_aug = AugmentConfig::for_corpus(corpus);
  std::vector<DissimilarityMatrix> rdms;
  std::vector<std::pair<int, int>> items;
  std::vector<std::vector<ProbeRecord>> per_model_records;
  for (std::size_t mi = 0; mi < models.size(); ++mi) {
    auto records = collect(models[mi], sub, &full_aug);
    for (int e = 0; e < e_count; ++e) {
      Tensor emb(Shape{ref_n, embed});
      for (std::int64_t i = 0; i < ref_n; ++i) {
        std::copy_n(records[static_cast<std::size_t>(i)].readouts[static_cast<std::size_t>(e)].data(),
                    embed, emb.data() + i * embed);
      }
      rdms.push_back(rdm(emb));
      items.emplace_back(static_cast<int>(mi), e);
    }
    per_model_records.push_back(std::move(records));
  }

  const auto rsa = second_order_rsa(rdms);
  StabilityReport rep = cluster_stability(rsa.similarity);
  rep.items = items;

  // exemplar MEIs per cluster: lowest item indices, ids in the full corpus
  rep.exemplar_members.resize(static_cast<std::size_t>(rep.chosen_clusters));
  rep.exemplar_meis.resize(static_cast<std::size_t>(rep.chosen_clusters));
  for (std::size_t it = 0; it < items.size(); ++it) {
    const int cl = rep.assignments[it];
    auto& members = rep.exemplar_members[static_cast<std::size_t>(cl)];
    if (static_cast<int>(members.size()) >= exemplars_per_cluster) continue;
    members.push_back(static_cast<int>(it));
    const auto [mi, e] = items[it];
    auto ids = mei_topn(per_model_records[static_cast<std::size_t>(mi)], e,
                        std::min<int>(meis_per_exemplar, static_cast<int>(ref_n)));
    for (auto& id : ids) id = ref[static_cast<std::size_t>(id)];  // map back to corpus ids
    rep.exemplar_meis[static_cast<std::size_t>(cl)].push_back(std::move(ids));
  }
  return rep;
}

}  // namespace moescope::probe
