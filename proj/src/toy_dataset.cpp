#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "skinlab/data.hpp"
#include "skinlab/error.hpp"
#include "skinlab/image.hpp"
#include "skinlab/rng.hpp"

namespace fs = std::filesystem;

namespace skinlab::data {

namespace {

constexpr int kToyWidth = 600;
constexpr int kToyHeight = 450;

struct ClassStyle {
  double hue_deg;
  double axis_ratio;   // minor / major
  double irregularity; // radial modulation amplitude
  int lobes;
};

ClassStyle style_for(int c, int classes) {
  const double t = classes > 1 ? static_cast<double>(c) / (classes - 1) : 0.0;
  return {std::fmod(360.0 * c / classes + 15.0, 360.0), 1.0 - 0.45 * t,
          0.03 + 0.22 * static_cast<double>((2 * c) % classes) / std::max(1, classes - 1), 3 + (c % 4) * 2};
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = std::fmod(std::fmod(h, 360.0) + 360.0, 360.0) / 60.0;
  const int sector = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

PixelArray draw_lesion(const ClassStyle& style, Rng& rng) {
  PixelArray img(kToyHeight, kToyWidth, RangeTag::Unit);
  const double cx = kToyWidth / 2.0 + rng.uniform(-15, 15);
  const double cy = kToyHeight / 2.0 + rng.uniform(-12, 12);
  const double major = rng.uniform(130, 150);
  const double minor = major * style.axis_ratio;
  const double angle = rng.uniform(0, std::numbers::pi);
  const double phase = rng.uniform(0, 2 * std::numbers::pi);
  const auto lesion = hsv_to_rgb(style.hue_deg + rng.uniform(-5, 5), rng.uniform(0.7, 0.78), rng.uniform(0.5, 0.56));
  const double skin_gain = rng.uniform(0.96, 1.03);
  const std::array<double, 3> skin{0.87 * skin_gain, 0.68 * skin_gain, 0.58 * skin_gain};
  const double wave_x = rng.uniform(0.01, 0.03), wave_y = rng.uniform(0.01, 0.03), wave_phase = rng.uniform(0, 6.3);
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (int y = 0; y < kToyHeight; ++y) {
    for (int x = 0; x < kToyWidth; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double u = (ca * dx + sa * dy) / major;
      const double v = (-sa * dx + ca * dy) / minor;
      const double rho0 = std::sqrt(u * u + v * v);
      double alpha = 0.0, rho = rho0;
      if (rho0 < 1.0 / (1.0 - style.irregularity) + 0.1) {
        const double edge = 1.0 + style.irregularity * std::sin(style.lobes * std::atan2(v, u) + phase);
        rho = rho0 / edge;
        alpha = std::clamp((1.0 - rho) / 0.06, 0.0, 1.0);
      }
      const double shade = 0.04 * std::sin(wave_x * x + wave_y * y + wave_phase);
      const double core = 1.0 - 0.2 * std::clamp(1.0 - rho, 0.0, 1.0);
      for (int c = 0; c < 3; ++c) {
        double value = skin[c] * (1.0 + shade) + 0.03 * (rng.uniform() - 0.5);
        if (alpha > 0.0) value = alpha * (lesion[c] * core + 0.08 * (rng.uniform() - 0.5)) + (1.0 - alpha) * value;
        img.at(c, y, x) = static_cast<float>(std::clamp(value, 0.0, 1.0));
      }
    }
  }
  return img;
}

}  // namespace

std::string toy_class_name(int index, int classes) {
  const int width = static_cast<int>(std::to_string(std::max(0, classes - 1)).size());
  std::string digits = std::to_string(index);
  return "class_" + std::string(std::max(0, width - static_cast<int>(digits.size())), '0') + digits;
}

DatasetManifest generate_toy_dataset(const fs::path& out_root, int classes, const std::vector<long>& per_class_counts,
                                     std::uint64_t seed) {
  if (classes < 2) throw Error(ErrorCode::BadSpec, "toy dataset needs at least 2 classes");
  if (static_cast<int>(per_class_counts.size()) != classes)
    throw Error(ErrorCode::BadSpec, "toy dataset needs one count per class");
  for (long n : per_class_counts)
    if (n <= 0) throw Error(ErrorCode::BadSpec, "toy class counts must be positive");

  const fs::path image_dir = out_root / "images";
  std::error_code ec;
  fs::create_directories(image_dir, ec);
  if (ec) throw Error(ErrorCode::IoFailure, "cannot create " + image_dir.string() + ": " + ec.message());

  static constexpr const char* kSites[] = {"back", "face", "lower extremity", "trunk", "upper extremity"};
  std::string csv = "image_id,file_name,diagnosis,age,sex,localization\n";
  for (int c = 0; c < classes; ++c) {
    const ClassStyle style = style_for(c, classes);
    const std::string name = toy_class_name(c, classes);
    for (long i = 0; i < per_class_counts[c]; ++i) {
      Rng rng(derive_seed(seed, "toy", static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(i)));
      const PixelArray img = draw_lesion(style, rng);
      char id[48];
      std::snprintf(id, sizeof(id), "toy_%02d_%05ld", c, i);
      const std::string file = std::string(id) + ".jpg";
      save_image(img, image_dir / file);
      const long age = 20 + static_cast<long>(rng.below(60));
      csv += std::string(id) + "," + file + "," + name + "," + std::to_string(age) + "," +
             (rng.bernoulli(0.5) ? "female" : "male") + "," + csv_escape(kSites[rng.below(5)]) + "\n";
    }
  }
  const fs::path csv_path = out_root / "metadata.csv";
  {
    std::ofstream out(csv_path, std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + csv_path.string());
    out << csv;
  }
  return ingest_metadata(csv_path, image_dir, seed).manifest;
}

}  // namespace skinlab::data
