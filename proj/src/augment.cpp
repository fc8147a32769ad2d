#include "moescope/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "moescope/corpus.hpp"

namespace moescope {

using nd::Shape;
using nd::Tensor;

AugmentConfig AugmentConfig::identity(int size) {
  AugmentConfig c;
  c.out_size = size;
  c.crop_scale_min = 1.0;
  c.crop_scale_max = 1.0;
  c.aspect_min = 1.0;
  c.aspect_max = 1.0;
  c.flip_prob = 0.0;
  c.jitter_prob = 0.0;
  c.grayscale_prob = 0.0;
  c.blur_prob = 0.0;
  return c;
}

AugmentConfig AugmentConfig::for_corpus(const Corpus& corpus) {
  AugmentConfig c;
  c.out_size = corpus.image_size();
  const auto n = corpus.size();
  const auto plane = static_cast<std::int64_t>(c.out_size) * c.out_size;
  for (int ch = 0; ch < 3; ++ch) {
    double mean = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      const double* p = corpus.images.data() + (i * 3 + ch) * plane;
      for (std::int64_t s = 0; s < plane; ++s) mean += p[s];
    }
    mean /= static_cast<double>(n * plane);
    double var = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      const double* p = corpus.images.data() + (i * 3 + ch) * plane;
      for (std::int64_t s = 0; s < plane; ++s) var += (p[s] - mean) * (p[s] - mean);
    }
    var /= static_cast<double>(n * plane);
    c.norm_mean[static_cast<std::size_t>(ch)] = mean;
    c.norm_std[static_cast<std::size_t>(ch)] = std::max(std::sqrt(var), 1e-6);
  }
  return c;
}

namespace {

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

// Bilinear sample with edge clamping; coordinates in source pixel space.
double sample(const double* plane, int s, double x, double y) {
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0;
  const double fy = y - y0;
  auto at = [&](int xi, int yi) {
    xi = std::clamp(xi, 0, s - 1);
    yi = std::clamp(yi, 0, s - 1);
    return plane[static_cast<std::int64_t>(yi) * s + xi];
  };
  const double top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
  const double bot = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
  return top * (1.0 - fy) + bot * fy;
}

void gaussian_blur(std::vector<double>& img, int s, double sigma) {
  const int radius = std::max(1, s / 20);
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double ksum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = v;
    ksum += v;
  }
  for (auto& v : kernel) v /= ksum;
  const auto plane = static_cast<std::int64_t>(s) * s;
  std::vector<double> tmp(static_cast<std::size_t>(plane));
  for (int ch = 0; ch < 3; ++ch) {
    double* p = img.data() + ch * plane;
    // horizontal
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          const int xi = std::clamp(x + i, 0, s - 1);
          acc += kernel[static_cast<std::size_t>(i + radius)] * p[static_cast<std::int64_t>(y) * s + xi];
        }
        tmp[static_cast<std::size_t>(y) * static_cast<std::size_t>(s) + static_cast<std::size_t>(x)] = acc;
      }
    }
    // vertical
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          const int yi = std::clamp(y + i, 0, s - 1);
          acc += kernel[static_cast<std::size_t>(i + radius)] *
                 tmp[static_cast<std::size_t>(yi) * static_cast<std::size_t>(s) + static_cast<std::size_t>(x)];
        }
        p[static_cast<std::int64_t>(y) * s + x] = acc;
      }
    }
  }
}

}  // namespace

Tensor augment_view(const Tensor& image, const AugmentConfig& cfg, std::uint64_t seed) {
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != image.dim(2)) {
    throw ShapeError("augment: expected [3,S,S], got " + nd::shape_str(image.shape()));
  }
  const int src = static_cast<int>(image.dim(1));
  const int out = cfg.out_size;
  SequentialRng rng(RandomStream(seed).child(0x61756721ull).seed());

  // 1. random resized crop
  const double scale = rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max);
  const double aspect = rng.uniform(cfg.aspect_min, cfg.aspect_max);
  double cw = src * std::sqrt(scale * aspect);
  double chh = src * std::sqrt(scale / aspect);
  cw = std::min(cw, static_cast<double>(src));
  chh = std::min(chh, static_cast<double>(src));
  const double x0 = rng.uniform() * (src - cw);
  const double y0 = rng.uniform() * (src - chh);

  const bool flip = rng.bernoulli(cfg.flip_prob) && cfg.flip_prob > 0.0;

  const auto oplane = static_cast<std::int64_t>(out) * out;
  std::vector<double> buf(static_cast<std::size_t>(3 * oplane));
  const auto splane = static_cast<std::int64_t>(src) * src;
  for (int ch = 0; ch < 3; ++ch) {
    const double* sp = image.data() + ch * splane;
    double* dp = buf.data() + ch * oplane;
    for (int y = 0; y < out; ++y) {
      for (int x = 0; x < out; ++x) {
        const int xe = flip ? out - 1 - x : x;
        const double sx = x0 + (xe + 0.5) * cw / out - 0.5;
        const double sy = y0 + (y + 0.5) * chh / out - 0.5;
        dp[static_cast<std::int64_t>(y) * out + x] = sample(sp, src, sx, sy);
      }
    }
  }

  // 2. colour jitter (brightness, contrast, saturation, hue, in that order)
  if (cfg.jitter_prob > 0.0 && rng.bernoulli(cfg.jitter_prob)) {
    const double fb = rng.uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness);
    const double fc = rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast);
    const double fs = rng.uniform(1.0 - cfg.saturation, 1.0 + cfg.saturation);
    const double dh = rng.uniform(-cfg.hue, cfg.hue);
    for (std::int64_t p = 0; p < oplane; ++p) {
      double r = buf[static_cast<std::size_t>(p)] * fb;
      double g = buf[static_cast<std::size_t>(oplane + p)] * fb;
      double b = buf[static_cast<std::size_t>(2 * oplane + p)] * fb;
      const double gray = 0.299 * r + 0.587 * g + 0.114 * b;
      r = 0.5 + fc * (r - 0.5);
      g = 0.5 + fc * (g - 0.5);
      b = 0.5 + fc * (b - 0.5);
      const double gray2 = 0.299 * r + 0.587 * g + 0.114 * b;
      r = gray2 + fs * (r - gray2);
      g = gray2 + fs * (g - gray2);
      b = gray2 + fs * (b - gray2);
      // hue rotation in the YIQ plane
      const double yy = 0.299 * r + 0.587 * g + 0.114 * b;
      const double ii = 0.596 * r - 0.274 * g - 0.322 * b;
      const double qq = 0.211 * r - 0.523 * g + 0.312 * b;
      const double ang = dh * 2.0 * std::numbers::pi;
      const double ir = ii * std::cos(ang) - qq * std::sin(ang);
      const double qr = ii * std::sin(ang) + qq * std::cos(ang);
      r = yy + 0.956 * ir + 0.621 * qr;
      g = yy - 0.272 * ir - 0.647 * qr;
      b = yy - 1.106 * ir + 1.703 * qr;
      buf[static_cast<std::size_t>(p)] = clamp01(r);
      buf[static_cast<std::size_t>(oplane + p)] = clamp01(g);
      buf[static_cast<std::size_t>(2 * oplane + p)] = clamp01(b);
      (void)gray;
    }
  } else if (cfg.jitter_prob > 0.0) {
    rng.uniform();  // keep the draw sequence aligned across branches
    rng.uniform();
    rng.uniform();
    rng.uniform();
  }

  // 3. random grayscale
  if (cfg.grayscale_prob > 0.0 && rng.bernoulli(cfg.grayscale_prob)) {
    for (std::int64_t p = 0; p < oplane; ++p) {
      const double gray = 0.299 * buf[static_cast<std::size_t>(p)] +
                          0.587 * buf[static_cast<std::size_t>(oplane + p)] +
                          0.114 * buf[static_cast<std::size_t>(2 * oplane + p)];
      buf[static_cast<std::size_t>(p)] = gray;
      buf[static_cast<std::size_t>(oplane + p)] = gray;
      buf[static_cast<std::size_t>(2 * oplane + p)] = gray;
    }
  }

  // 4. Gaussian blur
  if (cfg.blur_prob > 0.0 && rng.bernoulli(cfg.blur_prob)) {
    gaussian_blur(buf, out, rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max));
  } else if (cfg.blur_prob > 0.0) {
    rng.uniform();
  }

  // 5. normalize
  Tensor view(Shape{3, out, out});
  for (int ch = 0; ch < 3; ++ch) {
    const double m = cfg.norm_mean[static_cast<std::size_t>(ch)];
    const double s = cfg.norm_std[static_cast<std::size_t>(ch)];
    for (std::int64_t p = 0; p < oplane; ++p) {
      view.data()[ch * oplane + p] = (buf[static_cast<std::size_t>(ch * oplane + p)] - m) / s;
    }
  }
  return view;
}

std::pair<Tensor, Tensor> augment_pair(const Tensor& image, const AugmentConfig& cfg,
                                       std::uint64_t seed) {
  const RandomStream rs(seed);
  return {augment_view(image, cfg, rs.child(1).seed()),
          augment_view(image, cfg, rs.child(2).seed())};
}

}  // namespace moescope
