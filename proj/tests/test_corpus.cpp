#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "moescope/augment.hpp"
#include "moescope/ops.hpp"
#include "moescope/corpus.hpp"

using namespace moescope;
using nd::Shape;
using nd::Tensor;

namespace {

// Mean squared finite-difference energy of an image set, the independent
// statistic used to tell the two renderer families apart.
double gradient_energy(const Corpus& c, bool geometric) {
  const int s = c.image_size();
  const auto plane = static_cast<std::int64_t>(s) * s;
  double acc = 0.0;
  std::int64_t count = 0;
  for (std::int64_t i = 0; i < c.size(); ++i) {
    const bool is_geo = c.factors.data()[i * c.factor_dim()] >= 0.5;
    if (is_geo != geometric) continue;
    for (int ch = 0; ch < 3; ++ch) {
      const double* p = c.images.data() + (i * 3 + ch) * plane;
      for (int y = 0; y < s; ++y) {
        for (int x = 0; x + 1 < s; ++x) {
          const double d = p[y * s + x + 1] - p[y * s + x];
          acc += d * d;
          ++count;
        }
      }
      for (int y = 0; y + 1 < s; ++y) {
        for (int x = 0; x < s; ++x) {
          const double d = p[(y + 1) * s + x] - p[y * s + x];
          acc += d * d;
          ++count;
        }
      }
    }
  }
  return acc / static_cast<double>(count);
}

}  // namespace

TEST_CASE("synth_corpus determinism and shape contract") {
  Corpus a = synth_corpus(40, 32, 8, 123);
  Corpus b = synth_corpus(40, 32, 8, 123);
  CHECK(a.images.vec() == b.images.vec());
  CHECK(a.factors.vec() == b.factors.vec());
  CHECK(a.labels == b.labels);

  Corpus c = synth_corpus(40, 32, 8, 124);
  CHECK(c.images.vec() != a.images.vec());

  REQUIRE(a.factors.shape() == Shape{40, 8});
  for (std::int64_t i = 0; i < 40; ++i) {
    const double dom = a.factors.data()[i * 8];
    CHECK((dom == 0.0 || dom == 1.0));
    for (int d = 1; d < 8; ++d) {
      const double v = a.factors.data()[i * 8 + d];
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  for (std::int64_t i = 0; i < a.images.numel(); ++i) {
    CHECK(a.images.data()[i] >= 0.0);
    CHECK(a.images.data()[i] <= 1.0);
  }
  CHECK_THROWS_AS(synth_corpus(10, 32, 1, 1), ValidationError);
  CHECK_THROWS_AS(synth_corpus(10, 8, 4, 1), ValidationError);
}

TEST_CASE("domain factor flips the renderer family measurably") {
  Corpus c = synth_corpus(300, 32, 8, 7);
  const double organic = gradient_energy(c, false);
  const double geometric = gradient_energy(c, true);
  MESSAGE("gradient energy organic=", organic, " geometric=", geometric);
  CHECK(geometric > 2.0 * organic);
}

TEST_CASE("images are a pure function of the factor row") {
  Corpus c = synth_corpus(5, 32, 8, 9);
  for (std::int64_t i = 0; i < c.size(); ++i) {
    std::vector<double> out(3 * 32 * 32);
    render_image(std::span<const double>(c.factors.data() + i * 8, 8), 32, out.data());
    for (std::size_t j = 0; j < out.size(); ++j) {
      CHECK(out[j] == c.images.data()[i * 3072 + static_cast<std::int64_t>(j)]);
    }
  }
}

TEST_CASE("corpus save/load round trip is bit exact") {
  Corpus c = synth_corpus(12, 32, 5, 31);
  std::stringstream ss;
  save_corpus(ss, c);
  const std::string bytes = ss.str();
  Corpus l = load_corpus(ss);
  CHECK(l.images.vec() == c.images.vec());
  CHECK(l.factors.vec() == c.factors.vec());
  CHECK(l.labels == c.labels);
  CHECK(l.names == c.names);
  CHECK(l.factor_names == c.factor_names);

  std::stringstream ss2;
  save_corpus(ss2, l);
  CHECK(ss2.str() == bytes);

  std::stringstream bad("XXXXnope");
  CHECK_THROWS_AS(load_corpus(bad), ValidationError);
  std::stringstream trunc(bytes.substr(0, bytes.size() / 3));
  CHECK_THROWS_AS(load_corpus(trunc), ValidationError);
}

TEST_CASE("csv dimension table attaches when the row count matches") {
  Corpus c = synth_corpus(3, 32, 4, 5);
  std::stringstream csv("alpha,beta\n1.5,0\n0.25,2\n0,0.75\n");
  attach_factors_csv(c, csv);
  CHECK(c.factor_names == std::vector<std::string>{"alpha", "beta"});
  REQUIRE(c.factors.shape() == Shape{3, 2});
  CHECK(c.factors.data()[0] == 1.5);
  CHECK(c.factors.data()[5] == 0.75);

  std::stringstream wrong("a,b\n1,2\n3,4\n");
  CHECK_THROWS_WITH_AS(attach_factors_csv(c, wrong), doctest::Contains("row count 2"),
                       ValidationError);
  std::stringstream negative("a\n-1\n-2\n-3\n");
  CHECK_THROWS_AS(attach_factors_csv(c, negative), ValidationError);
}

TEST_CASE("identity augmentation yields exactly the normalized original") {
  Corpus c = synth_corpus(4, 32, 8, 77);
  AugmentConfig cfg = AugmentConfig::identity(32);
  cfg.norm_mean = {0.25, 0.5, 0.125};
  cfg.norm_std = {0.5, 0.25, 1.0};
  Tensor img = nd::reshape(nd::gather_rows(c.images, {1}), {3, 32, 32});
  Tensor view = augment_view(img, cfg, 909);
  REQUIRE(view.shape() == Shape{3, 32, 32});
  for (int ch = 0; ch < 3; ++ch) {
    for (std::int64_t p = 0; p < 1024; ++p) {
      const double expect =
          (img.data()[ch * 1024 + p] - cfg.norm_mean[static_cast<std::size_t>(ch)]) /
          cfg.norm_std[static_cast<std::size_t>(ch)];
      CHECK(view.data()[ch * 1024 + p] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("two views from distinct sub-seeds differ") {
  Corpus c = synth_corpus(64, 32, 8, 21);
  const AugmentConfig cfg = AugmentConfig::for_corpus(c);
  int differing = 0;
  for (std::int64_t i = 0; i < c.size(); ++i) {
    Tensor img = nd::reshape(nd::gather_rows(c.images, {static_cast<int>(i)}), {3, 32, 32});
    auto [a, b] = augment_pair(img, cfg, static_cast<std::uint64_t>(i) * 13 + 5);
    CHECK(a.shape() == Shape{3, 32, 32});
    double l2 = 0.0;
    for (std::int64_t j = 0; j < a.numel(); ++j) {
      const double d = a.data()[j] - b.data()[j];
      l2 += d * d;
    }
    if (l2 > 0.0) ++differing;
  }
  CHECK(differing == c.size());
}

TEST_CASE("augmentation is deterministic in its seed") {
  Corpus c = synth_corpus(2, 32, 8, 3);
  const AugmentConfig cfg = AugmentConfig::for_corpus(c);
  Tensor img = nd::reshape(nd::gather_rows(c.images, {0}), {3, 32, 32});
  Tensor v1 = augment_view(img, cfg, 42);
  Tensor v2 = augment_view(img, cfg, 42);
  CHECK(v1.vec() == v2.vec());
  Tensor v3 = augment_view(img, cfg, 43);
  CHECK(v1.vec() != v3.vec());
}

TEST_CASE("corpus normalization statistics cover the corpus") {
  Corpus c = synth_corpus(50, 32, 8, 11);
  const AugmentConfig cfg = AugmentConfig::for_corpus(c);
  for (int ch = 0; ch < 3; ++ch) {
    CHECK(cfg.norm_mean[static_cast<std::size_t>(ch)] > 0.0);
    CHECK(cfg.norm_mean[static_cast<std::size_t>(ch)] < 1.0);
    CHECK(cfg.norm_std[static_cast<std::size_t>(ch)] > 0.0);
  }
}
