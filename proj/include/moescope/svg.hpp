#pragma once

#include <string>
#include <vector>

#include "moescope/tensor.hpp"

namespace moescope::svg {

// All emitters format numbers with fixed precision so identical inputs
// produce byte-identical files.

std::string heatmap(const nd::Tensor& matrix, const std::vector<std::string>& row_labels,
                    const std::vector<std::string>& col_labels, const std::string& title,
                    bool annotate = true);

struct ScatterSeries {
  std::vector<double> x, y;
  std::vector<std::int64_t> color_ids;  // palette index per point
};
std::string scatter(const ScatterSeries& s, const std::string& title, const std::string& x_label,
                    const std::string& y_label, bool diagonal = false);

// Line chart with an optional marked point (used for silhouette curves).
std::string line_chart(const std::vector<double>& x, const std::vector<double>& y,
                       const std::string& title, const std::string& x_label,
                       const std::string& y_label, int mark_index = -1);

// Grid of RGB images rendered as pixel rectangles. Each entry of `images`
// is a [3,S,S] tensor; `cols` images per row.
std::string image_grid(const std::vector<nd::Tensor>& images,
                       const std::vector<std::string>& captions, int cols,
                       const std::string& title);

}  // namespace moescope::svg
