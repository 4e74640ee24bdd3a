#include "skinlab/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "skinlab/error.hpp"
#include "skinlab/rng.hpp"

namespace skinlab {

bool AugmentParams::is_geometric_identity() const {
  return !flip_horizontal && !flip_vertical && rotation_deg == 0.0 && translate_x == 0.0 && translate_y == 0.0 &&
         scale == 1.0;
}

bool AugmentParams::is_color_identity() const { return brightness == 1.0 && contrast == 1.0 && saturation == 1.0; }

AugmentParams draw_augment(std::uint64_t seed, bool with_affine, const AugmentRanges& ranges) {
  Rng rng(seed);
  AugmentParams p;
  p.flip_horizontal = rng.bernoulli(ranges.flip_probability);
  p.flip_vertical = rng.bernoulli(ranges.flip_probability);
  p.rotation_deg = rng.uniform(-ranges.max_rotation_deg, ranges.max_rotation_deg);
  p.brightness = rng.uniform(1.0 - ranges.max_color_delta, 1.0 + ranges.max_color_delta);
  p.contrast = rng.uniform(1.0 - ranges.max_color_delta, 1.0 + ranges.max_color_delta);
  p.saturation = rng.uniform(1.0 - ranges.max_color_delta, 1.0 + ranges.max_color_delta);
  if (with_affine) {
    p.translate_x = rng.uniform(-ranges.max_translate, ranges.max_translate);
    p.translate_y = rng.uniform(-ranges.max_translate, ranges.max_translate);
    p.scale = rng.uniform(1.0 - ranges.max_scale_delta, 1.0 + ranges.max_scale_delta);
  }
  return p;
}

namespace {

PixelArray flip(const PixelArray& img, bool horizontal, bool vertical) {
  PixelArray out = img;
  const int h = img.height();
  const int w = img.width();
  for (int c = 0; c < PixelArray::kChannels; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out.at(c, y, x) = img.at(c, vertical ? h - 1 - y : y, horizontal ? w - 1 - x : x);
  return out;
}

// Inverse-mapped rotation/scale/translation about the image center with
// bilinear sampling and edge replication.
PixelArray warp(const PixelArray& img, double rotation_deg, double scale, double tx, double ty) {
  PixelArray out = img;
  const int h = img.height();
  const int w = img.width();
  const double cx = (w - 1) / 2.0;
  const double cy = (h - 1) / 2.0;
  const double theta = rotation_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(theta) / scale;
  const double sn = std::sin(theta) / scale;
  const double shift_x = tx * w;
  const double shift_y = ty * h;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double dx = x - cx - shift_x;
      const double dy = y - cy - shift_y;
      const double sx = std::clamp(cx + cs * dx + sn * dy, 0.0, static_cast<double>(w - 1));
      const double sy = std::clamp(cy - sn * dx + cs * dy, 0.0, static_cast<double>(h - 1));
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      const int x1 = std::min(x0 + 1, w - 1);
      const int y1 = std::min(y0 + 1, h - 1);
      const float fx = static_cast<float>(sx - x0);
      const float fy = static_cast<float>(sy - y0);
      for (int c = 0; c < PixelArray::kChannels; ++c) {
        const float top = img.at(c, y0, x0) + fx * (img.at(c, y0, x1) - img.at(c, y0, x0));
        const float bot = img.at(c, y1, x0) + fx * (img.at(c, y1, x1) - img.at(c, y1, x0));
        out.at(c, y, x) = top + fy * (bot - top);
      }
    }
  }
  return out;
}

void jitter_color(PixelArray& img, const AugmentParams& p) {
  // Work in [0, 1] whatever the storage range is.
  const bool is_signed = img.range() == RangeTag::Signed;
  auto to01 = [&](float v) { return is_signed ? (v + 1.0f) * 0.5f : v; };
  auto from01 = [&](float v) { return is_signed ? v * 2.0f - 1.0f : v; };

  const std::size_t n = img.plane_size();
  auto r = img.plane(0);
  auto g = img.plane(1);
  auto b = img.plane(2);
  double mean_gray = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean_gray += 0.299 * to01(r[i]) + 0.587 * to01(g[i]) + 0.114 * to01(b[i]);
  mean_gray /= static_cast<double>(n);
  const auto br = static_cast<float>(p.brightness);
  const auto ct = static_cast<float>(p.contrast);
  const auto st = static_cast<float>(p.saturation);
  const auto mg = static_cast<float>(mean_gray * p.brightness);
  for (std::size_t i = 0; i < n; ++i) {
    float rv = std::clamp(to01(r[i]) * br, 0.0f, 1.0f);
    float gv = std::clamp(to01(g[i]) * br, 0.0f, 1.0f);
    float bv = std::clamp(to01(b[i]) * br, 0.0f, 1.0f);
    rv = std::clamp(mg + ct * (rv - mg), 0.0f, 1.0f);
    gv = std::clamp(mg + ct * (gv - mg), 0.0f, 1.0f);
    bv = std::clamp(mg + ct * (bv - mg), 0.0f, 1.0f);
    const float gray = 0.299f * rv + 0.587f * gv + 0.114f * bv;
    r[i] = from01(gray + st * (rv - gray));
    g[i] = from01(gray + st * (gv - gray));
    b[i] = from01(gray + st * (bv - gray));
  }
}

}  // namespace

PixelArray apply_augment(const PixelArray& img, const AugmentParams& params) {
  if (img.range() != RangeTag::Unit && img.range() != RangeTag::Signed)
    throw Error(ErrorCode::RangeTagMismatch, "augmentation expects unit_0_1 or signed_m1_1 input");
  PixelArray out = img;
  if (params.flip_horizontal || params.flip_vertical) out = flip(out, params.flip_horizontal, params.flip_vertical);
  if (params.rotation_deg != 0.0 || params.scale != 1.0 || params.translate_x != 0.0 || params.translate_y != 0.0)
    out = warp(out, params.rotation_deg, params.scale, params.translate_x, params.translate_y);
  if (!params.is_color_identity()) jitter_color(out, params);
  out.clamp_to_range();
  return out;
}

PixelArray gan_augment(const PixelArray& img, std::uint64_t seed) {
  return apply_augment(img, draw_augment(seed, /*with_affine=*/true));
}

PixelArray classifier_augment(const PixelArray& img, std::uint64_t seed) {
  return apply_augment(img, draw_augment(seed, /*with_affine=*/false));
}

}  // namespace skinlab
