#include "moescope/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <numbers>
#include <ostream>
#include <sstream>

#include "moescope/common.hpp"
#include "moescope/rng.hpp"

namespace moescope {

using nd::Shape;
using nd::Tensor;

void Corpus::validate() const {
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != images.dim(3)) {
    throw ValidationError("corpus: images must be [N,3,S,S], got " + nd::shape_str(images.shape()));
  }
  const auto n = images.dim(0);
  if (static_cast<std::int64_t>(labels.size()) != n) {
    throw ValidationError("corpus: label count " + std::to_string(labels.size()) +
                          " != image count " + std::to_string(n));
  }
  if (factors.rank() != 2 || factors.dim(0) != n) {
    throw ValidationError("corpus: factors must be [N,D] with N=" + std::to_string(n));
  }
  if (static_cast<std::int64_t>(names.size()) != n) {
    throw ValidationError("corpus: name count mismatch");
  }
  if (static_cast<std::int64_t>(factor_names.size()) != factors.dim(1)) {
    throw ValidationError("corpus: factor name count mismatch");
  }
}

// --- synthetic renderer -----------------------------------------------------

namespace {

constexpr double kTau = 2.0 * std::numbers::pi;

double knob(std::span<const double> f, std::size_t i, double fallback) {
  return i < f.size() ? f[i] : fallback;
}

// Phase material derived from the factor bits, so the image stays a pure
// function of the factor row.
std::uint64_t factor_hash(std::span<const double> f) {
  std::uint64_t h = 0x9E3779B97F4A7C15ull;
  for (double v : f) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    h = fnv1a64(&bits, 8, h);
  }
  return h;
}

struct Rgb {
  double r, g, b;
};

Rgb palette(double hue, double saturation) {
  const double r = 0.5 + 0.5 * std::cos(kTau * hue);
  const double g = 0.5 + 0.5 * std::cos(kTau * (hue - 1.0 / 3.0));
  const double b = 0.5 + 0.5 * std::cos(kTau * (hue - 2.0 / 3.0));
  const double gray = 0.299 * r + 0.587 * g + 0.114 * b;
  return {gray + saturation * (r - gray), gray + saturation * (g - gray),
          gray + saturation * (b - gray)};
}

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

void render_organic(std::span<const double> f, int size, double* out) {
  const double freq = 1.0 + 3.0 * knob(f, 1, 0.5);
  const double curvature = knob(f, 2, 0.5);
  const double saturation = knob(f, 3, 0.5);
  const int harmonics = 2 + static_cast<int>(std::lround(4.0 * knob(f, 4, 0.5)));
  const double phase0 = knob(f, 5, 0.0);
  const double hue = knob(f, 6, 0.3);
  const double contrast = 0.7 + 0.3 * knob(f, 7, 0.5);

  const RandomStream hs(factor_hash(f));
  std::vector<double> theta(static_cast<std::size_t>(harmonics));
  std::vector<double> fmul(static_cast<std::size_t>(harmonics));
  std::vector<double> phi(static_cast<std::size_t>(harmonics));
  for (int h = 0; h < harmonics; ++h) {
    theta[static_cast<std::size_t>(h)] = kTau * hs.uniform(static_cast<std::uint64_t>(3 * h));
    fmul[static_cast<std::size_t>(h)] = 0.5 + hs.uniform(static_cast<std::uint64_t>(3 * h + 1));
    phi[static_cast<std::size_t>(h)] =
        kTau * (phase0 + hs.uniform(static_cast<std::uint64_t>(3 * h + 2)));
  }

  const Rgb hi = palette(hue, saturation);
  const Rgb lo = palette(hue + 0.5, saturation);
  const auto plane = static_cast<std::int64_t>(size) * size;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double u = (x + 0.5) / size;
      const double v = (y + 0.5) / size;
      const double uw = u + 0.25 * curvature * std::sin(kTau * v);
      const double vw = v + 0.25 * curvature * std::sin(kTau * u);
      double acc = 0.0;
      for (int h = 0; h < harmonics; ++h) {
        const auto hh = static_cast<std::size_t>(h);
        const double proj = uw * std::cos(theta[hh]) + vw * std::sin(theta[hh]);
        acc += std::sin(kTau * freq * fmul[hh] * proj + phi[hh]);
      }
      const double t =
          clamp01(0.5 + 0.5 * contrast * acc / std::sqrt(static_cast<double>(harmonics)));
      const std::int64_t p = static_cast<std::int64_t>(y) * size + x;
      out[0 * plane + p] = clamp01(lo.r + t * (hi.r - lo.r));
      out[1 * plane + p] = clamp01(lo.g + t * (hi.g - lo.g));
      out[2 * plane + p] = clamp01(lo.b + t * (hi.b - lo.b));
    }
  }
}

void render_geometric(std::span<const double> f, int size, double* out) {
  const int stripes = 2 + static_cast<int>(std::lround(6.0 * knob(f, 1, 0.5)));
  const double skew = 0.25 * std::numbers::pi * knob(f, 2, 0.5);
  const double saturation = knob(f, 3, 0.5);
  const int boxes = 1 + static_cast<int>(std::lround(5.0 * knob(f, 4, 0.5)));
  const double phase0 = knob(f, 5, 0.0);
  const double hue = knob(f, 6, 0.3);
  const double contrast = 0.45 + 0.4 * knob(f, 7, 0.5);

  const RandomStream hs(factor_hash(f) ^ 0xABCDu);
  const Rgb fg = palette(hue, saturation);
  const Rgb bg = palette(hue + 0.5, saturation);
  const double ca = std::cos(skew), sa = std::sin(skew);
  const auto plane = static_cast<std::int64_t>(size) * size;

  std::vector<double> field(static_cast<std::size_t>(plane));
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double u = (x + 0.5) / size;
      const double v = (y + 0.5) / size;
      double s = std::fmod((u * ca + v * sa) * stripes + phase0, 1.0);
      if (s < 0) s += 1.0;
      field[static_cast<std::size_t>(y) * static_cast<std::size_t>(size) +
            static_cast<std::size_t>(x)] = s < 0.5 ? 1.0 : 0.0;
    }
  }

  // solid rectangles invert the stripe field under them
  for (int bx = 0; bx < boxes; ++bx) {
    const auto base = static_cast<std::uint64_t>(16 + 4 * bx);
    const double cx = hs.uniform(base);
    const double cy = hs.uniform(base + 1);
    const double w = 0.1 + 0.3 * hs.uniform(base + 2);
    const double h = 0.1 + 0.3 * hs.uniform(base + 3);
    const int x0 = std::max(0, static_cast<int>((cx - w / 2) * size));
    const int x1 = std::min(size, static_cast<int>((cx + w / 2) * size));
    const int y0 = std::max(0, static_cast<int>((cy - h / 2) * size));
    const int y1 = std::min(size, static_cast<int>((cy + h / 2) * size));
    for (int y = y0; y < y1; ++y) {
      for (int x = x0; x < x1; ++x) {
        auto& cell = field[static_cast<std::size_t>(y) * static_cast<std::size_t>(size) +
                           static_cast<std::size_t>(x)];
        cell = 1.0 - cell;
      }
    }
  }

  for (std::int64_t p = 0; p < plane; ++p) {
    const double t = 0.5 + contrast * (field[static_cast<std::size_t>(p)] - 0.5);
    out[0 * plane + p] = clamp01(bg.r + t * (fg.r - bg.r));
    out[1 * plane + p] = clamp01(bg.g + t * (fg.g - bg.g));
    out[2 * plane + p] = clamp01(bg.b + t * (fg.b - bg.b));
  }
}

}  // namespace

void render_image(std::span<const double> factors, int size, double* out_rgb) {
  if (factors.empty()) throw ValidationError("render: empty factor row");
  if (factors[0] >= 0.5) {
    render_geometric(factors, size, out_rgb);
  } else {
    render_organic(factors, size, out_rgb);
  }
}

Corpus synth_corpus(std::int64_t n, int size, int dims, std::uint64_t seed) {
  if (dims < 2) {
    throw ValidationError("synth_corpus: dims must be >= 2 (column 0 is the domain factor)");
  }
  if (size < 16) throw ValidationError("synth_corpus: size must be >= 16 to render");
  if (n < 1) throw ValidationError("synth_corpus: n must be positive");

  Corpus c;
  c.images = Tensor(Shape{n, 3, size, size});
  c.factors = Tensor(Shape{n, dims});
  c.labels.resize(static_cast<std::size_t>(n));
  c.names.resize(static_cast<std::size_t>(n));

  static const char* kKnobNames[] = {"domain",           "spatial_frequency", "curvature",
                                     "color_saturation", "element_count",     "phase",
                                     "hue",              "contrast"};
  for (int d = 0; d < dims; ++d) {
    c.factor_names.push_back(d < 8 ? kKnobNames[d] : "knob" + std::to_string(d));
  }

  const RandomStream rs(RandomStream(seed).child(0x636f7270ull).seed());
  const auto plane = static_cast<std::int64_t>(3) * size * size;
  for (std::int64_t i = 0; i < n; ++i) {
    double* frow = c.factors.data() + i * dims;
    const auto base = static_cast<std::uint64_t>(i) * static_cast<std::uint64_t>(dims + 2);
    frow[0] = (rs.bits(base) & 1) ? 1.0 : 0.0;
    for (int d = 1; d < dims; ++d) frow[d] = rs.uniform(base + static_cast<std::uint64_t>(d));
    render_image(std::span<const double>(frow, static_cast<std::size_t>(dims)), size,
                 c.images.data() + i * plane);
    const double sf = frow[1];
    const int quart = std::min(3, static_cast<int>(sf * 4.0));
    c.labels[static_cast<std::size_t>(i)] = static_cast<std::int64_t>(frow[0]) * 4 + quart;
    c.names[static_cast<std::size_t>(i)] = "synth_" + std::to_string(i);
  }
  return c;
}

// --- MOEC serialization --------------------------------------------------------

namespace {
template <typename T>
void wr(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T rd(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ValidationError("corpus file: truncated");
  return v;
}
void wr_string(std::ostream& os, const std::string& s) {
  wr<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
std::string rd_string(std::istream& is) {
  const auto len = rd<std::uint32_t>(is);
  std::string s(len, '\0');
  is.read(s.data(), len);
  if (!is) throw ValidationError("corpus file: truncated string");
  return s;
}
}  // namespace

void save_corpus(std::ostream& os, const Corpus& c) {
  c.validate();
  os.write("MOEC", 4);
  wr<std::uint32_t>(os, 1);
  wr<std::uint64_t>(os, static_cast<std::uint64_t>(c.size()));
  wr<std::uint64_t>(os, static_cast<std::uint64_t>(c.image_size()));
  wr<std::uint64_t>(os, static_cast<std::uint64_t>(c.factor_dim()));
  nd::write_ndt1(os, c.images);
  os.write(reinterpret_cast<const char*>(c.labels.data()),
           static_cast<std::streamsize>(c.labels.size() * sizeof(std::int64_t)));
  nd::write_ndt1(os, c.factors);
  for (const auto& nm : c.names) wr_string(os, nm);
  for (const auto& nm : c.factor_names) wr_string(os, nm);
}

Corpus load_corpus(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "MOEC", 4) != 0) throw ValidationError("corpus file: bad magic");
  const auto version = rd<std::uint32_t>(is);
  if (version != 1) {
    throw ValidationError("corpus file: unsupported version " + std::to_string(version));
  }
  const auto n = rd<std::uint64_t>(is);
  const auto s = rd<std::uint64_t>(is);
  const auto d = rd<std::uint64_t>(is);
  Corpus c;
  c.images = nd::read_ndt1(is);
  if (c.images.rank() != 4 || c.images.dim(0) != static_cast<std::int64_t>(n) ||
      c.images.dim(2) != static_cast<std::int64_t>(s)) {
    throw ValidationError("corpus file: image tensor disagrees with header");
  }
  c.labels.resize(n);
  is.read(reinterpret_cast<char*>(c.labels.data()),
          static_cast<std::streamsize>(n * sizeof(std::int64_t)));
  if (!is) throw ValidationError("corpus file: truncated labels");
  c.factors = nd::read_ndt1(is);
  if (c.factors.rank() != 2 || c.factors.dim(0) != static_cast<std::int64_t>(n) ||
      c.factors.dim(1) != static_cast<std::int64_t>(d)) {
    throw ValidationError("corpus file: factor tensor disagrees with header");
  }
  for (std::uint64_t i = 0; i < n; ++i) c.names.push_back(rd_string(is));
  for (std::uint64_t i = 0; i < d; ++i) c.factor_names.push_back(rd_string(is));
  c.validate();
  return c;
}

void save_corpus_file(const std::filesystem::path& p, const Corpus& c) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw ValidationError("cannot write corpus file: " + p.string());
  save_corpus(os, c);
}

Corpus load_corpus_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw ValidationError("cannot read corpus file: " + p.string());
  return load_corpus(is);
}

void attach_factors_csv(Corpus& c, std::istream& csv) {
  std::string line;
  if (!std::getline(csv, line)) throw ValidationError("factor csv: missing header row");
  auto split = [](const std::string& text) {
    std::vector<std::string> cells;
    std::stringstream ss(text);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    return cells;
  };
  const auto header = split(line);
  if (header.empty()) throw ValidationError("factor csv: empty header");
  std::vector<std::vector<double>> rows;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != header.size()) {
      throw ValidationError("factor csv: row " + std::to_string(rows.size() + 1) + " has " +
                            std::to_string(cells.size()) + " cells, header has " +
                            std::to_string(header.size()));
    }
    std::vector<double> vals;
    for (const auto& cell : cells) {
      double v = 0.0;
      try {
        v = std::stod(cell);
      } catch (const std::exception&) {
        throw ValidationError("factor csv: non-numeric cell '" + cell + "'");
      }
      if (v < 0.0) {
        throw ValidationError("factor csv: behaviour dimensions must be nonnegative, got " + cell);
      }
      vals.push_back(v);
    }
    rows.push_back(std::move(vals));
  }
  if (static_cast<std::int64_t>(rows.size()) != c.size()) {
    throw ValidationError("factor csv: row count " + std::to_string(rows.size()) +
                          " does not match corpus image count " + std::to_string(c.size()));
  }
  const auto d = static_cast<std::int64_t>(header.size());
  Tensor f(Shape{c.size(), d});
  for (std::int64_t i = 0; i < c.size(); ++i) {
    for (std::int64_t j = 0; j < d; ++j) {
      f.data()[i * d + j] = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    }
  }
  c.factors = f;
  c.factor_names = header;
}

}  // namespace moescope
