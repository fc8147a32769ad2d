#pragma once

#include <array>
#include <cstdint>
#include <utility>

#include "moescope/tensor.hpp"

namespace moescope {

struct Corpus;

// Two-view contrastive augmentation: random resized crop, horizontal flip,
// colour jitter, random grayscale, Gaussian blur, per-channel normalization.
struct AugmentConfig {
  int out_size = 32;
  double crop_scale_min = 0.3;
  double crop_scale_max = 1.0;
  double aspect_min = 3.0 / 4.0;
  double aspect_max = 4.0 / 3.0;
  double flip_prob = 0.5;
  double jitter_prob = 0.8;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.4;
  double hue = 0.1;
  double grayscale_prob = 0.2;
  double blur_prob = 0.5;
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 2.0;
  std::array<double, 3> norm_mean{0.0, 0.0, 0.0};
  std::array<double, 3> norm_std{1.0, 1.0, 1.0};

  // All probabilities zero, crop fixed at scale 1: the view is exactly the
  // normalized original.
  static AugmentConfig identity(int size);
  // Defaults with normalization statistics computed from the corpus.
  static AugmentConfig for_corpus(const Corpus& corpus);
};

// One augmented view of image [3,S,S]; every random draw comes from the
// seeded stream in a fixed order (crop, flip, jitter, grayscale, blur).
nd::Tensor augment_view(const nd::Tensor& image, const AugmentConfig& cfg, std::uint64_t seed);

// The two independently augmented views of an image, from sub-seeds
// derived from `seed`.
std::pair<nd::Tensor, nd::Tensor> augment_pair(const nd::Tensor& image, const AugmentConfig& cfg,
                                               std::uint64_t seed);

}  // namespace moescope
