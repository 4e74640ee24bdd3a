#pragma once

#include <cstdint>

#include "skinlab/image.hpp"

namespace skinlab {

// One composed random transform. All fields at their defaults is the identity.
struct AugmentParams {
  bool flip_horizontal = false;
  bool flip_vertical = false;
  double rotation_deg = 0.0;
  // Affine part (GAN pipeline only): translation as a fraction of size, isotropic scale.
  double translate_x = 0.0;
  double translate_y = 0.0;
  double scale = 1.0;
  // Color jitter factors, 1.0 = unchanged.
  double brightness = 1.0;
  double contrast = 1.0;
  double saturation = 1.0;

  bool is_geometric_identity() const;
  bool is_color_identity() const;
};

struct AugmentRanges {
  double flip_probability = 0.5;
  double max_rotation_deg = 20.0;
  double max_translate = 0.05;
  double max_scale_delta = 0.05;
  double max_color_delta = 0.2;
};

AugmentParams draw_augment(std::uint64_t seed, bool with_affine, const AugmentRanges& ranges = {});

// Applies `params` to a Unit or Signed image; output keeps shape and range tag
// and is clamped to the tag's bounds.
PixelArray apply_augment(const PixelArray& img, const AugmentParams& params);

// Flip, rotation, color jitter and affine.
PixelArray gan_augment(const PixelArray& img, std::uint64_t seed);
// Flip, rotation and color jitter; no affine.
PixelArray classifier_augment(const PixelArray& img, std::uint64_t seed);

}  // namespace skinlab
