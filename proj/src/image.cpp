#include "skinlab/image.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "skinlab/error.hpp"

namespace skinlab {

std::string_view to_string(RangeTag tag) {
  switch (tag) {
    case RangeTag::Byte: return "byte_0_255";
    case RangeTag::Unit: return "unit_0_1";
    case RangeTag::Signed: return "signed_m1_1";
    case RangeTag::BackboneNormalized: return "backbone_normalized";
  }
  return "unknown";
}

PixelArray::PixelArray(int height, int width, RangeTag tag, float fill)
    : height_(height), width_(width), tag_(tag) {
  if (height <= 0 || width <= 0) throw Error(ErrorCode::BadTarget, "image dimensions must be positive");
  values_.assign(static_cast<std::size_t>(kChannels) * height * width, fill);
}

PixelArray::PixelArray(int height, int width, RangeTag tag, std::vector<float> planar)
    : height_(height), width_(width), tag_(tag), values_(std::move(planar)) {
  if (height <= 0 || width <= 0) throw Error(ErrorCode::BadTarget, "image dimensions must be positive");
  if (values_.size() != static_cast<std::size_t>(kChannels) * height * width)
    throw Error(ErrorCode::ShapeMismatch, "planar buffer size does not match 3x" + std::to_string(height) + "x" +
                                              std::to_string(width));
}

std::pair<float, float> PixelArray::bounds(RangeTag tag) {
  switch (tag) {
    case RangeTag::Byte: return {0.0f, 255.0f};
    case RangeTag::Unit: return {0.0f, 1.0f};
    case RangeTag::Signed: return {-1.0f, 1.0f};
    case RangeTag::BackboneNormalized: break;
  }
  return {-std::numeric_limits<float>::infinity(), std::numeric_limits<float>::infinity()};
}

bool PixelArray::within_bounds() const {
  const auto [lo, hi] = bounds(tag_);
  return std::all_of(values_.begin(), values_.end(), [&](float v) { return std::isfinite(v) && v >= lo && v <= hi; });
}

void PixelArray::clamp_to_range() {
  const auto [lo, hi] = bounds(tag_);
  for (float& v : values_) v = std::clamp(v, lo, hi);
}

namespace {

void require_tag(const PixelArray& img, RangeTag expected, std::string_view op) {
  if (img.range() != expected)
    throw Error(ErrorCode::RangeTagMismatch, std::string(op) + " expects " + std::string(to_string(expected)) +
                                                 " input, got " + std::string(to_string(img.range())));
}

}  // namespace

PixelArray resize_image(const PixelArray& img, int target_height, int target_width) {
  if (target_height <= 0 || target_width <= 0)
    throw Error(ErrorCode::BadTarget, "resize target must be positive, got " + std::to_string(target_height) + "x" +
                                          std::to_string(target_width));
  if (img.range() != RangeTag::Byte && img.range() != RangeTag::Unit)
    throw Error(ErrorCode::RangeTagMismatch, "resize expects byte_0_255 or unit_0_1 input");
  if (target_height == img.height() && target_width == img.width()) return img;

  const int h = img.height();
  const int w = img.width();
  PixelArray out(target_height, target_width, img.range());
  const double sy = static_cast<double>(h) / target_height;
  const double sx = static_cast<double>(w) / target_width;

  // Precomputed horizontal taps.
  std::vector<int> x0(target_width), x1(target_width);
  std::vector<float> fx(target_width);
  for (int x = 0; x < target_width; ++x) {
    double src = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
    x0[x] = static_cast<int>(std::floor(src));
    x1[x] = std::min(x0[x] + 1, w - 1);
    fx[x] = static_cast<float>(src - x0[x]);
  }
  for (int c = 0; c < PixelArray::kChannels; ++c) {
    for (int y = 0; y < target_height; ++y) {
      const double src = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
      const int y0 = static_cast<int>(std::floor(src));
      const int y1 = std::min(y0 + 1, h - 1);
      const float fy = static_cast<float>(src - y0);
      for (int x = 0; x < target_width; ++x) {
        const float top = img.at(c, y0, x0[x]) + fx[x] * (img.at(c, y0, x1[x]) - img.at(c, y0, x0[x]));
        const float bot = img.at(c, y1, x0[x]) + fx[x] * (img.at(c, y1, x1[x]) - img.at(c, y1, x0[x]));
        out.at(c, y, x) = top + fy * (bot - top);
      }
    }
  }
  return out;
}

PixelArray normalize_for_gan(const PixelArray& img) {
  require_tag(img, RangeTag::Byte, "normalize_for_gan");
  PixelArray out = img;
  for (float& v : out.values()) v = (v / 255.0f - 0.5f) / 0.5f;
  out.retag(RangeTag::Signed);
  return out;
}

PixelArray denormalize_from_gan(const PixelArray& img) {
  require_tag(img, RangeTag::Signed, "denormalize_from_gan");
  PixelArray out = img;
  for (float& v : out.values()) v = (v + 1.0f) / 2.0f;
  out.retag(RangeTag::Unit);
  return out;
}

PixelArray normalize_for_classifier(const PixelArray& img) {
  require_tag(img, RangeTag::Unit, "normalize_for_classifier");
  PixelArray out = img;
  for (int c = 0; c < PixelArray::kChannels; ++c)
    for (float& v : out.plane(c)) v = (v - kBackboneMean[c]) / kBackboneStd[c];
  out.retag(RangeTag::BackboneNormalized);
  return out;
}

PixelArray to_unit(const PixelArray& img) {
  if (img.range() == RangeTag::Unit) return img;
  require_tag(img, RangeTag::Byte, "to_unit");
  PixelArray out = img;
  for (float& v : out.values()) v /= 255.0f;
  out.retag(RangeTag::Unit);
  return out;
}

PixelArray to_byte(const PixelArray& img) {
  if (img.range() == RangeTag::Byte) return img;
  require_tag(img, RangeTag::Unit, "to_byte");
  PixelArray out = img;
  for (float& v : out.values()) v *= 255.0f;
  out.retag(RangeTag::Byte);
  return out;
}

std::vector<std::uint8_t> to_rgb8(const PixelArray& img) {
  const float scale = img.range() == RangeTag::Unit ? 255.0f : 1.0f;
  if (img.range() != RangeTag::Unit && img.range() != RangeTag::Byte)
    throw Error(ErrorCode::RangeTagMismatch, "8-bit export expects byte_0_255 or unit_0_1 input");
  std::vector<std::uint8_t> rgb(img.plane_size() * 3);
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(std::round(img.at(c, y, x) * scale), 0.0f, 255.0f);
        rgb[(static_cast<std::size_t>(y) * img.width() + x) * 3 + c] = static_cast<std::uint8_t>(v);
      }
  return rgb;
}

PixelArray from_rgb8(std::span<const std::uint8_t> rgb, int height, int width) {
  PixelArray out(height, width, RangeTag::Byte);
  if (rgb.size() != out.plane_size() * 3) throw Error(ErrorCode::ShapeMismatch, "rgb buffer size mismatch");
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c) out.at(c, y, x) = rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  return out;
}

PixelArray load_image(const std::filesystem::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw Error(ErrorCode::IoFailure, "cannot read image " + path.string());
  PixelArray out(bgr.rows, bgr.cols, RangeTag::Byte);
  for (int y = 0; y < bgr.rows; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < bgr.cols; ++x) {
      out.at(0, y, x) = row[x][2];
      out.at(1, y, x) = row[x][1];
      out.at(2, y, x) = row[x][0];
    }
  }
  return out;
}

void save_image(const PixelArray& img, const std::filesystem::path& path) {
  const auto rgb = to_rgb8(img);
  cv::Mat bgr(img.height(), img.width(), CV_8UC3);
  for (int y = 0; y < img.height(); ++y) {
    auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < img.width(); ++x) {
      const std::size_t i = (static_cast<std::size_t>(y) * img.width() + x) * 3;
      row[x] = cv::Vec3b(rgb[i + 2], rgb[i + 1], rgb[i]);
    }
  }
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::vector<int> params;
  const auto ext = path.extension().string();
  if (ext == ".jpg" || ext == ".jpeg") params = {cv::IMWRITE_JPEG_QUALITY, 95};
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), bgr, params);
  } catch (const cv::Exception& e) {
    throw Error(ErrorCode::IoFailure, "cannot write image " + path.string() + ": " + e.what());
  }
  if (!ok) throw Error(ErrorCode::IoFailure, "cannot write image " + path.string());
}

std::pair<int, int> probe_image_size(const std::filesystem::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw Error(ErrorCode::IoFailure, "cannot read image " + path.string());
  return {m.rows, m.cols};
}

}  // namespace skinlab
