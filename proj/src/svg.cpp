#include "moescope/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace moescope::svg {

using nd::Tensor;

namespace {

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

std::string fmt3(double v) {
  char buf[48];
  if (std::isnan(v)) return "";
  std::snprintf(buf, sizeof(buf), "%.3f", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      default: out += c;
    }
  }
  return out;
}

// compact viridis-like ramp, fixed stops
std::string ramp_color(double t) {
  static const int stops[][3] = {{68, 1, 84},   {59, 82, 139},  {33, 145, 140},
                                 {94, 201, 98}, {253, 231, 37}};
  t = std::clamp(t, 0.0, 1.0);
  const double pos = t * 4.0;
  const int lo = std::min(3, static_cast<int>(pos));
  const double f = pos - lo;
  char buf[16];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x",
                static_cast<int>(std::lround(stops[lo][0] + f * (stops[lo + 1][0] - stops[lo][0]))),
                static_cast<int>(std::lround(stops[lo][1] + f * (stops[lo + 1][1] - stops[lo][1]))),
                static_cast<int>(std::lround(stops[lo][2] + f * (stops[lo + 1][2] - stops[lo][2]))));
  return buf;
}

std::string palette_color(std::int64_t id) {
  static const char* colors[] = {"#4477aa", "#ee6677", "#228833", "#ccbb44",
                                 "#66ccee", "#aa3377", "#bbbbbb", "#222222"};
  return colors[static_cast<std::size_t>(id < 0 ? 7 : id % 8)];
}

std::string header(double w, double h) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(w) + "\" height=\"" + fmt(h) +
         "\" viewBox=\"0 0 " + fmt(w) + " " + fmt(h) +
         "\">\n<style>text{font-family:monospace;font-size:11px;}</style>\n"
         "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

std::string text(double x, double y, const std::string& s, const std::string& extra = "") {
  return "<text x=\"" + fmt(x) + "\" y=\"" + fmt(y) + "\"" + (extra.empty() ? "" : " " + extra) +
         ">" + escape(s) + "</text>\n";
}

}  // namespace

std::string heatmap(const Tensor& matrix, const std::vector<std::string>& row_labels,
                    const std::vector<std::string>& col_labels, const std::string& title,
                    bool annotate) {
  if (matrix.rank() != 2) throw ShapeError("svg heatmap: expected a matrix");
  const auto rows = matrix.dim(0), cols = matrix.dim(1);
  const double cell = 34.0, left = 90.0, top = 50.0;
  const double w = left + cell * static_cast<double>(cols) + 20.0;
  const double h = top + cell * static_cast<double>(rows) + 30.0;

  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::int64_t i = 0; i < matrix.numel(); ++i) {
    const double v = matrix.data()[i];
    if (std::isnan(v)) continue;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (!std::isfinite(lo)) {
    lo = 0.0;
    hi = 1.0;
  }
  const double span = hi > lo ? hi - lo : 1.0;

  std::string out = header(w, h);
  out += text(left, 24.0, title);
  for (std::int64_t r = 0; r < rows; ++r) {
    if (r < static_cast<std::int64_t>(row_labels.size())) {
      out += text(6.0, top + cell * static_cast<double>(r) + cell * 0.65, row_labels[static_cast<std::size_t>(r)]);
    }
    for (std::int64_t c = 0; c < cols; ++c) {
      const double v = matrix.data()[r * cols + c];
      const std::string fill = std::isnan(v) ? "#dddddd" : ramp_color((v - lo) / span);
      out += "<rect x=\"" + fmt(left + cell * static_cast<double>(c)) + "\" y=\"" +
             fmt(top + cell * static_cast<double>(r)) + "\" width=\"" + fmt(cell) + "\" height=\"" +
             fmt(cell) + "\" fill=\"" + fill + "\" stroke=\"white\"/>\n";
      if (annotate && !std::isnan(v)) {
        const double rel = (v - lo) / span;
        out += text(left + cell * static_cast<double>(c) + 3.0,
                    top + cell * static_cast<double>(r) + cell * 0.65, fmt3(v),
                    rel > 0.6 ? "fill=\"black\"" : "fill=\"white\"");
      }
    }
  }
  for (std::int64_t c = 0; c < cols && c < static_cast<std::int64_t>(col_labels.size()); ++c) {
    out += text(left + cell * static_cast<double>(c) + 4.0, top - 8.0, col_labels[static_cast<std::size_t>(c)]);
  }
  out += "</svg>\n";
  return out;
}

std::string scatter(const ScatterSeries& s, const std::string& title, const std::string& x_label,
                    const std::string& y_label, bool diagonal) {
  if (s.x.size() != s.y.size()) throw ShapeError("svg scatter: x/y length mismatch");
  const double size = 360.0, left = 60.0, top = 46.0, bottom = 44.0;
  const double w = left + size + 24.0, h = top + size + bottom;

  double xlo = 0.0, xhi = 1.0, ylo = 0.0, yhi = 1.0;
  if (!s.x.empty()) {
    xlo = *std::min_element(s.x.begin(), s.x.end());
    xhi = *std::max_element(s.x.begin(), s.x.end());
    ylo = *std::min_element(s.y.begin(), s.y.end());
    yhi = *std::max_element(s.y.begin(), s.y.end());
  }
  if (xhi <= xlo) xhi = xlo + 1.0;
  if (yhi <= ylo) yhi = ylo + 1.0;

  auto px = [&](double v) { return left + size * (v - xlo) / (xhi - xlo); };
  auto py = [&](double v) { return top + size * (1.0 - (v - ylo) / (yhi - ylo)); };

  std::string out = header(w, h);
  out += text(left, 24.0, title);
  out += "<rect x=\"" + fmt(left) + "\" y=\"" + fmt(top) + "\" width=\"" + fmt(size) +
         "\" height=\"" + fmt(size) + "\" fill=\"none\" stroke=\"#888888\"/>\n";
  if (diagonal) {
    out += "<line x1=\"" + fmt(left) + "\" y1=\"" + fmt(top + size) + "\" x2=\"" + fmt(left + size) +
           "\" y2=\"" + fmt(top) + "\" stroke=\"#999999\" stroke-dasharray=\"5,4\"/>\n";
  }
  for (std::size_t i = 0; i < s.x.size(); ++i) {
    const auto id = i < s.color_ids.size() ? s.color_ids[i] : 0;
    out += "<circle cx=\"" + fmt(px(s.x[i])) + "\" cy=\"" + fmt(py(s.y[i])) +
           "\" r=\"3\" fill=\"" + palette_color(id) + "\" fill-opacity=\"0.75\"/>\n";
  }
  out += text(left, top + size + 30.0, x_label + "  [" + fmt3(xlo) + ", " + fmt3(xhi) + "]");
  out += text(6.0, top - 8.0, y_label + "  [" + fmt3(ylo) + ", " + fmt3(yhi) + "]");
  out += "</svg>\n";
  return out;
}

std::string line_chart(const std::vector<double>& x, const std::vector<double>& y,
                       const std::string& title, const std::string& x_label,
                       const std::string& y_label, int mark_index) {
  if (x.size() != y.size() || x.empty()) throw ShapeError("svg line chart: bad series");
  const double size = 320.0, left = 64.0, top = 46.0, bottom = 44.0;
  const double w = left + size + 24.0, h = top + size + bottom;
  double xlo = *std::min_element(x.begin(), x.end());
  double xhi = *std::max_element(x.begin(), x.end());
  double ylo = *std::min_element(y.begin(), y.end());
  double yhi = *std::max_element(y.begin(), y.end());
  if (xhi <= xlo) xhi = xlo + 1.0;
  if (yhi <= ylo) yhi = ylo + 1.0;
  auto px = [&](double v) { return left + size * (v - xlo) / (xhi - xlo); };
  auto py = [&](double v) { return top + size * (1.0 - (v - ylo) / (yhi - ylo)); };

  std::string out = header(w, h);
  out += text(left, 24.0, title);
  out += "<rect x=\"" + fmt(left) + "\" y=\"" + fmt(top) + "\" width=\"" + fmt(size) +
         "\" height=\"" + fmt(size) + "\" fill=\"none\" stroke=\"#888888\"/>\n";
  std::string pts;
  for (std::size_t i = 0; i < x.size(); ++i) {
    pts += fmt(px(x[i])) + "," + fmt(py(y[i])) + " ";
  }
  out += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"#4477aa\" stroke-width=\"2\"/>\n";
  for (std::size_t i = 0; i < x.size(); ++i) {
    out += "<circle cx=\"" + fmt(px(x[i])) + "\" cy=\"" + fmt(py(y[i])) +
           "\" r=\"3\" fill=\"#4477aa\"/>\n";
  }
  if (mark_index >= 0 && mark_index < static_cast<int>(x.size())) {
    out += "<circle cx=\"" + fmt(px(x[static_cast<std::size_t>(mark_index)])) + "\" cy=\"" +
           fmt(py(y[static_cast<std::size_t>(mark_index)])) +
           "\" r=\"6\" fill=\"none\" stroke=\"#ee6677\" stroke-width=\"2\"/>\n";
  }
  out += text(left, top + size + 30.0, x_label + "  [" + fmt3(xlo) + ", " + fmt3(xhi) + "]");
  out += text(6.0, top - 8.0, y_label + "  [" + fmt3(ylo) + ", " + fmt3(yhi) + "]");
  out += "</svg>\n";
  return out;
}

std::string image_grid(const std::vector<Tensor>& images, const std::vector<std::string>& captions,
                       int cols, const std::string& title) {
  if (images.empty()) throw ValidationError("svg image grid: no images");
  const auto s = images.front().dim(1);
  const double scale = std::max(1.0, 64.0 / static_cast<double>(s));
  const double tile = static_cast<double>(s) * scale, pad = 14.0, top = 40.0;
  const int rows = (static_cast<int>(images.size()) + cols - 1) / cols;
  const double w = pad + (tile + pad) * cols;
  const double h = top + (tile + pad + 14.0) * rows;

  std::string out = header(w, h);
  out += text(pad, 24.0, title);
  for (std::size_t idx = 0; idx < images.size(); ++idx) {
    const auto& img = images[idx];
    if (img.rank() != 3 || img.dim(0) != 3 || img.dim(1) != s || img.dim(2) != s) {
      throw ShapeError("svg image grid: inconsistent image shapes");
    }
    const int r = static_cast<int>(idx) / cols;
    const int c = static_cast<int>(idx) % cols;
    const double ox = pad + (tile + pad) * c;
    const double oy = top + (tile + pad + 14.0) * r;
    out += "<g transform=\"translate(" + fmt(ox) + "," + fmt(oy) + ") scale(" + fmt(scale) +
           ")\">\n";
    const auto plane = s * s;
    for (std::int64_t y = 0; y < s; ++y) {
      for (std::int64_t x = 0; x < s; ++x) {
        char color[16];
        auto chan = [&](int ch) {
          return static_cast<int>(std::lround(
              255.0 * std::clamp(img.data()[ch * plane + y * s + x], 0.0, 1.0)));
        };
        std::snprintf(color, sizeof(color), "#%02x%02x%02x", chan(0), chan(1), chan(2));
        out += "<rect x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(y) +
               "\" width=\"1\" height=\"1\" fill=\"" + color + "\"/>\n";
      }
    }
    out += "</g>\n";
    if (idx < captions.size()) out += text(ox, oy + tile + 12.0, captions[idx]);
  }
  out += "</svg>\n";
  return out;
}

}  // namespace moescope::svg
