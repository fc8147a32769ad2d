#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "moescope/tensor.hpp"

namespace moescope {

// Image set with per-image metadata. `factors` is the latent dimension
// table: ground truth for the synthetic generator, or an imported
// behaviour-dimension table (nonnegative by contract).
struct Corpus {
  nd::Tensor images;                      // [N,3,S,S] in [0,1]
  std::vector<std::int64_t> labels;       // class id, -1 if unlabeled
  nd::Tensor factors;                     // [N,D]
  std::vector<std::string> names;         // per image
  std::vector<std::string> factor_names;  // per dimension

  std::int64_t size() const { return images.rank() == 4 ? images.dim(0) : 0; }
  int image_size() const { return images.rank() == 4 ? static_cast<int>(images.dim(2)) : 0; }
  int factor_dim() const { return factors.rank() == 2 ? static_cast<int>(factors.dim(1)) : 0; }
  void validate() const;
};

// Synthetic two-domain corpus. Factor column 0 is the binary domain switch
// (0 = organic texture renderer, 1 = geometric structure renderer); the
// remaining columns are continuous knobs in [0,1]:
//   1 spatial_frequency, 2 curvature, 3 color_saturation, 4 element_count,
//   5 phase, 6 hue, 7 contrast (defaults apply when dims is smaller).
// Images are a pure function of the factor row; labels are
// domain*4 + spatial-frequency quartile.
Corpus synth_corpus(std::int64_t n, int size, int dims, std::uint64_t seed);

// Renders one image from a factor row; exposed for tests.
void render_image(std::span<const double> factors, int size, double* out_rgb);

// --- MOEC file -----------------------------------------------------------
// "MOEC", u32 version, u64 N/S/D, images (NDT1), labels (raw i64[N]),
// factors (NDT1), N image names then D dimension names (u32 length-prefixed
// UTF-8). Round-trips bit-exactly.
void save_corpus(std::ostream& os, const Corpus& c);
Corpus load_corpus(std::istream& is);
void save_corpus_file(const std::filesystem::path& p, const Corpus& c);
Corpus load_corpus_file(const std::filesystem::path& p);

// Attaches a dimension table from CSV (header row of dimension names, one
// row per image, values nonnegative). Row-count mismatch is an error that
// names both counts.
void attach_factors_csv(Corpus& c, std::istream& csv);

}  // namespace moescope
