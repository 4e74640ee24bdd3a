#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

namespace skinlab {

enum class RangeTag { Byte, Unit, Signed, BackboneNormalized };

std::string_view to_string(RangeTag tag);

// Planar RGB image (CHW, float). The range tag records which value domain the
// samples live in; the normalization functions check it so a pipeline stage
// cannot be applied twice.
class PixelArray {
 public:
  static constexpr int kChannels = 3;

  PixelArray() = default;
  PixelArray(int height, int width, RangeTag tag, float fill = 0.0f);
  PixelArray(int height, int width, RangeTag tag, std::vector<float> planar);

  int height() const { return height_; }
  int width() const { return width_; }
  RangeTag range() const { return tag_; }
  bool empty() const { return values_.empty(); }
  std::size_t plane_size() const { return static_cast<std::size_t>(height_) * width_; }

  float& at(int c, int y, int x) { return values_[(static_cast<std::size_t>(c) * height_ + y) * width_ + x]; }
  float at(int c, int y, int x) const { return values_[(static_cast<std::size_t>(c) * height_ + y) * width_ + x]; }

  std::span<float> plane(int c) { return {values_.data() + c * plane_size(), plane_size()}; }
  std::span<const float> plane(int c) const { return {values_.data() + c * plane_size(), plane_size()}; }

  std::span<float> values() { return values_; }
  std::span<const float> values() const { return values_; }

  void retag(RangeTag tag) { tag_ = tag; }

  // Lower/upper bounds implied by the tag (infinite for BackboneNormalized).
  static std::pair<float, float> bounds(RangeTag tag);
  bool within_bounds() const;
  void clamp_to_range();

  friend bool operator==(const PixelArray& a, const PixelArray& b) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  RangeTag tag_ = RangeTag::Unit;
  std::vector<float> values_;
};

// Per-channel statistics of ImageNet-pretrained backbones.
inline constexpr std::array<float, 3> kBackboneMean{0.485f, 0.456f, 0.406f};
inline constexpr std::array<float, 3> kBackboneStd{0.229f, 0.224f, 0.225f};

// Bilinear resampling with half-pixel centers; Byte and Unit inputs only.
PixelArray resize_image(const PixelArray& img, int target_height, int target_width);

PixelArray normalize_for_gan(const PixelArray& img);
PixelArray denormalize_from_gan(const PixelArray& img);
PixelArray normalize_for_classifier(const PixelArray& img);

// Byte <-> Unit scaling without any other change.
PixelArray to_unit(const PixelArray& img);
PixelArray to_byte(const PixelArray& img);

// Image files. Loading yields a Byte image; saving accepts Byte or Unit and
// rounds to 8 bits. Format follows the file extension.
PixelArray load_image(const std::filesystem::path& path);
void save_image(const PixelArray& img, const std::filesystem::path& path);
// Reads only enough of the file to report (height, width).
std::pair<int, int> probe_image_size(const std::filesystem::path& path);

// Interleaved 8-bit RGB copy (row-major HWC), rounding and clamping.
std::vector<std::uint8_t> to_rgb8(const PixelArray& img);
PixelArray from_rgb8(std::span<const std::uint8_t> rgb, int height, int width);

}  // namespace skinlab
