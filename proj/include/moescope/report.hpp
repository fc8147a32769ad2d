#pragma once

#include <filesystem>
#include <vector>

#include "moescope/corpus.hpp"
#include "moescope/model.hpp"
#include "moescope/probe.hpp"

namespace moescope::report {

struct ProbeOptions {
  std::uint64_t seed = 1;
  int top_m = 3;        // dimensions per lasso row, images per routing panel
  int mei_count = 8;    // images per MEI grid
  bool weighted_routing = false;  // gate-weight-mass variant of the routing matrix
  bool run_lasso = true;
  bool run_separability = true;
};

// Runs every enabled probe analysis on one model and writes the bundle:
// CSV tables, SVG plots, and summary.json (canonical). Returns the paths.
std::vector<std::filesystem::path> write_probe_bundle(const std::filesystem::path& dir,
                                                      MoeModel& model, const Corpus& corpus,
                                                      const ProbeOptions& opt);

struct StabilityOptions {
  std::int64_t reference_images = 512;
  int exemplars_per_cluster = 5;
  int meis_per_exemplar = 10;
};

std::vector<std::filesystem::path> write_stability_bundle(const std::filesystem::path& dir,
                                                          std::vector<MoeModel>& models,
                                                          const Corpus& corpus,
                                                          const StabilityOptions& opt);

// Re-renders the SVG plots recorded in a summary.json produced by either
// bundle writer (matrix/curve/scatter panels; MEI grids need the corpus and
// are not re-rendered here).
std::vector<std::filesystem::path> render_from_summary(const std::filesystem::path& summary_file,
                                                       const std::filesystem::path& out_dir);

}  // namespace moescope::report
