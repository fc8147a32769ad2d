#include "moescope/report.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "moescope/svg.hpp"

namespace moescope::report {

namespace fs = std::filesystem;
using nd::Tensor;
using nlohmann::json;

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "";
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

void write_file(std::vector<fs::path>& artifacts, const fs::path& p, const std::string& content) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw ValidationError("report: cannot write " + p.string());
  os << content;
  artifacts.push_back(p);
}

std::string matrix_csv(const Tensor& m, const std::vector<std::string>& row_labels,
                       const std::vector<std::string>& col_labels, const std::string& corner) {
  std::string out = corner;
  for (const auto& c : col_labels) out += "," + c;
  out += "\n";
  const auto cols = m.dim(1);
  for (std::int64_t r = 0; r < m.dim(0); ++r) {
    out += row_labels[static_cast<std::size_t>(r)];
    for (std::int64_t c = 0; c < cols; ++c) out += "," + num(m.data()[r * cols + c]);
    out += "\n";
  }
  return out;
}

json matrix_json(const Tensor& m) {
  json rows = json::array();
  const auto cols = m.dim(1);
  for (std::int64_t r = 0; r < m.dim(0); ++r) {
    json row = json::array();
    for (std::int64_t c = 0; c < cols; ++c) {
      const double v = m.data()[r * cols + c];
      if (std::isnan(v)) {
        row.push_back(nullptr);
      } else {
        row.push_back(v);
      }
    }
    rows.push_back(row);
  }
  return rows;
}

Tensor matrix_from_json(const json& rows) {
  const auto r = static_cast<std::int64_t>(rows.size());
  const auto c = static_cast<std::int64_t>(rows.at(0).size());
  Tensor m(nd::Shape{r, c});
  for (std::int64_t i = 0; i < r; ++i) {
    for (std::int64_t j = 0; j < c; ++j) {
      const auto& cell = rows.at(static_cast<std::size_t>(i)).at(static_cast<std::size_t>(j));
      m.data()[i * c + j] = cell.is_null() ? std::numeric_limits<double>::quiet_NaN()
                                           : cell.get<double>();
    }
  }
  return m;
}

std::vector<std::string> expert_labels(int e_count) {
  std::vector<std::string> labels;
  for (int e = 0; e < e_count; ++e) labels.push_back("expert" + std::to_string(e));
  return labels;
}

Tensor corpus_image(const Corpus& corpus, int id) {
  const int s = corpus.image_size();
  return nd::reshape(nd::gather_rows(corpus.images, {id}), {3, s, s});
}

}  // namespace

std::vector<fs::path> write_probe_bundle(const fs::path& dir, MoeModel& model,
                                         const Corpus& corpus, const ProbeOptions& opt) {
  fs::create_directories(dir);
  std::vector<fs::path> artifacts;
  const int e_count = model.config().num_experts;

  auto records = probe::collect(model, corpus);
  json summary;
  summary["kind"] = "probe";
  summary["config"] = json::parse(model.config().to_json());

  // routing
  const auto rs = probe::routing_stats(records, opt.top_m);
  std::vector<std::string> class_labels;
  for (auto c : rs.class_ids) class_labels.push_back("class" + std::to_string(c));
  const Tensor& routing = opt.weighted_routing ? rs.weight_mass : rs.proportions;
  write_file(artifacts, dir / "routing_matrix.csv",
             matrix_csv(routing, class_labels, expert_labels(e_count), "class"));
  write_file(artifacts, dir / "routing_matrix.svg",
             svg::heatmap(routing, class_labels, expert_labels(e_count),
                          opt.weighted_routing ? "routing weight mass" : "routing proportions"));
  summary["routing"]["counting"] = opt.weighted_routing ? "weight_mass" : "topk_membership";
  summary["routing"]["class_ids"] = rs.class_ids;
  summary["routing"]["matrix"] = matrix_json(routing);
  {
    std::string csv = "expert,rank,image_id\n";
    for (int e = 0; e < e_count; ++e) {
      const auto& ids = rs.top_images[static_cast<std::size_t>(e)];
      for (std::size_t i = 0; i < ids.size(); ++i) {
        csv += std::to_string(e) + "," + std::to_string(i) + "," + std::to_string(ids[i]) + "\n";
      }
    }
    write_file(artifacts, dir / "routing_top_images.csv", csv);
    summary["routing"]["top_images"] = rs.top_images;
  }

  // top-2 agreement
  const double agreement = probe::topk_agreement(model, corpus, opt.seed);
  write_file(artifacts, dir / "agreement.csv",
             "topk_agreement,chance\n" + num(agreement) + "," +
                 num(1.0) + "\n");
  summary["topk_agreement"] = agreement;

  // MEIs
  for (int e = 0; e < e_count; ++e) {
    const auto ids = probe::mei_topn(records, e, std::min<int>(opt.mei_count,
                                                               static_cast<int>(records.size())));
    std::string csv = "rank,image_id,readout_norm\n";
    std::vector<Tensor> tiles;
    std::vector<std::string> captions;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      csv += std::to_string(i) + "," + std::to_string(ids[i]) + "," +
             num(records[static_cast<std::size_t>(ids[i])].norms[static_cast<std::size_t>(e)]) + "\n";
      tiles.push_back(corpus_image(corpus, ids[i]));
      captions.push_back("#" + std::to_string(ids[i]));
    }
    const std::string tag = std::to_string(e);
    write_file(artifacts, dir / ("mei_expert" + tag + ".csv"), csv);
    write_file(artifacts, dir / ("mei_expert" + tag + ".svg"),
               svg::image_grid(tiles, captions, 4, "most exciting inputs, expert " + tag));
    summary["mei"]["expert" + tag] = ids;
  }

  // gating vs readout
  for (int e = 0; e < e_count; ++e) {
    const auto gvr = probe::gating_vs_readout(records, e);
    std::string csv = "gating_norm,readout_norm,label\n";
    for (std::size_t i = 0; i < gvr.gating.size(); ++i) {
      csv += num(gvr.gating[i]) + "," + num(gvr.readout[i]) + "," +
             std::to_string(gvr.labels[i]) + "\n";
    }
    const std::string tag = std::to_string(e);
    write_file(artifacts, dir / ("gating_vs_readout_expert" + tag + ".csv"), csv);
    svg::ScatterSeries series{gvr.gating, gvr.readout, gvr.labels};
    write_file(artifacts, dir / ("gating_vs_readout_expert" + tag + ".svg"),
               svg::scatter(series, "gating vs readout, expert " + tag + " (r=" + num(gvr.pearson_r) + ")",
                            "normalized gating logit", "normalized readout norm", true));
    summary["gating_vs_readout"]["expert" + tag]["pearson_r"] = gvr.pearson_r;
  }

  // separability
  if (opt.run_separability) {
    for (int e = 0; e < e_count; ++e) {
      const auto sep = probe::pairwise_separability(records, e, opt.seed + static_cast<std::uint64_t>(e));
      std::vector<std::string> labels;
      for (auto c : sep.class_ids) labels.push_back("class" + std::to_string(c));
      const std::string tag = std::to_string(e);
      write_file(artifacts, dir / ("separability_expert" + tag + ".csv"),
                 matrix_csv(sep.matrix, labels, labels, "class"));
      write_file(artifacts, dir / ("separability_expert" + tag + ".svg"),
                 svg::heatmap(sep.matrix, labels, labels, "pairwise balanced accuracy, expert " + tag));
      summary["separability"]["expert" + tag] = matrix_json(sep.matrix);
      summary["separability"]["class_ids"] = sep.class_ids;
    }
  }

  // lasso rows for both targets
  if (opt.run_lasso) {
    for (const bool readout : {false, true}) {
      std::string csv = "expert,target,r2_mean,r2_std,lambda,flagged_folds";
      for (int i = 0; i < opt.top_m; ++i) {
        csv += ",feature" + std::to_string(i + 1) + ",weight" + std::to_string(i + 1);
      }
      csv += "\n";
      std::string coef_csv = "expert";
      for (const auto& nm : corpus.factor_names) coef_csv += "," + nm;
      coef_csv += "\n";
      for (int e = 0; e < e_count; ++e) {
        const auto row = probe::lasso_regress(records, corpus, e, readout,
                                              opt.seed + static_cast<std::uint64_t>(e), opt.top_m);
        csv += std::to_string(e) + "," + row.target + "," + num(row.r2_mean) + "," +
               num(row.r2_std) + "," + num(row.lambda) + "," + std::to_string(row.flagged_folds);
        for (const auto& [nm, wv] : row.top) csv += "," + nm + "," + num(wv);
        csv += "\n";
        coef_csv += std::to_string(e);
        for (double cv : row.coefficients) coef_csv += "," + num(cv);
        coef_csv += "\n";
        json jrow;
        jrow["r2_mean"] = row.r2_mean;
        jrow["r2_std"] = row.r2_std;
        jrow["lambda"] = row.lambda;
        for (const auto& [nm, wv] : row.top) jrow["top"].push_back({{"name", nm}, {"weight", wv}});
        jrow["coefficients"] = row.coefficients;
        summary["lasso"][row.target]["expert" + std::to_string(e)] = jrow;
      }
      const std::string base = readout ? "lasso_readout" : "lasso_gating";
      write_file(artifacts, dir / (base + ".csv"), csv);
      write_file(artifacts, dir / (base + "_coefficients.csv"), coef_csv);
    }
  }

  write_file(artifacts, dir / "summary.json", summary.dump() + "\n");
  return artifacts;
}

std::vector<fs::path> write_stability_bundle(const fs::path& dir, std::vector<MoeModel>& models,
                                             const Corpus& corpus, const StabilityOptions& opt) {
  fs::create_directories(dir);
  std::vector<fs::path> artifacts;
  const auto rep = probe::stability_analysis(models, corpus, opt.reference_images,
                                             opt.exemplars_per_cluster, opt.meis_per_exemplar);

  std::vector<std::string> item_labels;
  for (const auto& [mi, e] : rep.items) {
    item_labels.push_back("m" + std::to_string(mi) + "e" + std::to_string(e));
  }
  write_file(artifacts, dir / "stability_similarity.csv",
             matrix_csv(rep.similarity, item_labels, item_labels, "pair"));
  write_file(artifacts, dir / "stability_similarity.svg",
             svg::heatmap(rep.similarity, item_labels, item_labels,
                          "second-order spearman similarity", rep.items.size() <= 16));

  {
    std::string csv = "item,model,expert,cluster\n";
    for (std::size_t i = 0; i < rep.items.size(); ++i) {
      csv += item_labels[i] + "," + std::to_string(rep.items[i].first) + "," +
             std::to_string(rep.items[i].second) + "," + std::to_string(rep.assignments[i]) + "\n";
    }
    write_file(artifacts, dir / "stability_clusters.csv", csv);
  }

  {
    std::string csv = "clusters,silhouette\n";
    std::vector<double> xs, ys;
    int mark = -1;
    for (std::size_t i = 0; i < rep.silhouette_curve.size(); ++i) {
      const auto& [k, s] = rep.silhouette_curve[i];
      csv += std::to_string(k) + "," + num(s) + "\n";
      xs.push_back(k);
      ys.push_back(s);
      if (k == rep.chosen_clusters) mark = static_cast<int>(i);
    }
    write_file(artifacts, dir / "silhouette_curve.csv", csv);
    if (!xs.empty()) {
      write_file(artifacts, dir / "silhouette_curve.svg",
                 svg::line_chart(xs, ys, "silhouette by cluster count", "clusters",
                                 "mean silhouette", mark));
    }
  }

  {
    std::string csv = "item,x,y,cluster\n";
    svg::ScatterSeries series;
    for (std::size_t i = 0; i < rep.items.size(); ++i) {
      const double x = rep.mds_coords.data()[static_cast<std::int64_t>(i) * 2];
      const double y = rep.mds_coords.data()[static_cast<std::int64_t>(i) * 2 + 1];
      csv += item_labels[i] + "," + num(x) + "," + num(y) + "," +
             std::to_string(rep.assignments[i]) + "\n";
      series.x.push_back(x);
      series.y.push_back(y);
      series.color_ids.push_back(rep.assignments[i]);
    }
    write_file(artifacts, dir / "mds_coords.csv", csv);
    write_file(artifacts, dir / "mds.svg",
               svg::scatter(series, "MDS of (model, expert) pairs", "dim 1", "dim 2"));
  }

  for (std::size_t cl = 0; cl < rep.exemplar_meis.size(); ++cl) {
    std::vector<Tensor> tiles;
    std::vector<std::string> captions;
    for (std::size_t mem = 0; mem < rep.exemplar_meis[cl].size(); ++mem) {
      const int item = rep.exemplar_members[cl][mem];
      for (int id : rep.exemplar_meis[cl][mem]) {
        tiles.push_back(corpus_image(corpus, id));
        captions.push_back(item_labels[static_cast<std::size_t>(item)] + " #" + std::to_string(id));
      }
    }
    if (tiles.empty()) continue;
    write_file(artifacts, dir / ("cluster" + std::to_string(cl) + "_meis.svg"),
               svg::image_grid(tiles, captions, opt.meis_per_exemplar,
                               "cluster " + std::to_string(cl) + " exemplar MEIs"));
  }

  json summary;
  summary["kind"] = "stability";
  summary["items"] = json::array();
  for (const auto& [mi, e] : rep.items) summary["items"].push_back({{"model", mi}, {"expert", e}});
  summary["similarity"] = matrix_json(rep.similarity);
  summary["chosen_clusters"] = rep.chosen_clusters;
  summary["assignments"] = rep.assignments;
  json curve = json::array();
  for (const auto& [k, s] : rep.silhouette_curve) curve.push_back({{"clusters", k}, {"silhouette", s}});
  summary["silhouette_curve"] = curve;
  summary["mds"] = matrix_json(rep.mds_coords);
  summary["degenerate"] = rep.degenerate;
  summary["mds_clamped"] = rep.mds_clamped;
  summary["exemplar_members"] = rep.exemplar_members;
  summary["exemplar_meis"] = rep.exemplar_meis;
  write_file(artifacts, dir / "summary.json", summary.dump() + "\n");
  return artifacts;
}

std::vector<fs::path> render_from_summary(const fs::path& summary_file, const fs::path& out_dir) {
  std::ifstream is(summary_file);
  if (!is) throw ValidationError("report: cannot read " + summary_file.string());
  json summary = json::parse(is);
  fs::create_directories(out_dir);
  std::vector<fs::path> artifacts;

  const std::string kind = summary.value("kind", "");
  if (kind == "probe") {
    const Tensor routing = matrix_from_json(summary.at("routing").at("matrix"));
    std::vector<std::string> class_labels;
    for (const auto& c : summary.at("routing").at("class_ids")) {
      class_labels.push_back("class" + std::to_string(c.get<std::int64_t>()));
    }
    write_file(artifacts, out_dir / "routing_matrix.svg",
               svg::heatmap(routing, class_labels, expert_labels(static_cast<int>(routing.dim(1))),
                            "routing proportions"));
    if (summary.contains("separability")) {
      for (auto& [key, value] : summary.at("separability").items()) {
        if (key == "class_ids") continue;
        const Tensor m = matrix_from_json(value);
        std::vector<std::string> labels;
        for (std::int64_t i = 0; i < m.dim(0); ++i) labels.push_back("c" + std::to_string(i));
        write_file(artifacts, out_dir / ("separability_" + key + ".svg"),
                   svg::heatmap(m, labels, labels, "pairwise balanced accuracy, " + key));
      }
    }
  } else if (kind == "stability") {
    const Tensor sim = matrix_from_json(summary.at("similarity"));
    std::vector<std::string> labels;
    for (const auto& item : summary.at("items")) {
      labels.push_back("m" + std::to_string(item.at("model").get<int>()) + "e" +
                       std::to_string(item.at("expert").get<int>()));
    }
    write_file(artifacts, out_dir / "stability_similarity.svg",
               svg::heatmap(sim, labels, labels, "second-order spearman similarity",
                            labels.size() <= 16));
    std::vector<double> xs, ys;
    int mark = -1;
    const int chosen = summary.at("chosen_clusters").get<int>();
    for (const auto& pt : summary.at("silhouette_curve")) {
      xs.push_back(pt.at("clusters").get<double>());
      ys.push_back(pt.at("silhouette").get<double>());
      if (pt.at("clusters").get<int>() == chosen) mark = static_cast<int>(xs.size()) - 1;
    }
    if (!xs.empty()) {
      write_file(artifacts, out_dir / "silhouette_curve.svg",
                 svg::line_chart(xs, ys, "silhouette by cluster count", "clusters",
                                 "mean silhouette", mark));
    }
    const Tensor mds = matrix_from_json(summary.at("mds"));
    svg::ScatterSeries series;
    for (std::int64_t i = 0; i < mds.dim(0); ++i) {
      series.x.push_back(mds.data()[i * 2]);
      series.y.push_back(mds.data()[i * 2 + 1]);
      series.color_ids.push_back(summary.at("assignments").at(static_cast<std::size_t>(i)).get<int>());
    }
    write_file(artifacts, out_dir / "mds.svg",
               svg::scatter(series, "MDS of (model, expert) pairs", "dim 1", "dim 2"));
  } else {
    throw ValidationError("report: summary kind '" + kind + "' is not renderable");
  }
  return artifacts;
}

}  // namespace moescope::report
