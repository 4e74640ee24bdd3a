#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "skinlab/image.hpp"
#include "skinlab/nn/tensor.hpp"

namespace skinlab::xai {

// Row-major H x W segment labels, 0..count-1, each segment 4-connected.
struct SuperpixelMap {
  int height = 0, width = 0;
  int count = 0;
  std::vector<int> labels;

  int at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }
};

struct SlicConfig {
  int target_segments = 50;
  double compactness = 10.0;  // Lab units per grid step
  int iterations = 10;
};

// SLIC over CIELAB + position on a unit-range RGB image. BadTarget when the
// target is below 1 or above the pixel count.
SuperpixelMap segment_superpixels(const PixelArray& img, const SlicConfig& config = {});

// The only view explainers get of a model: a batch of unit-range images in,
// an N x K matrix of class probabilities out.
using BatchPredictor = std::function<nn::Tensor(const std::vector<PixelArray>&)>;

// Value of the explained class for each keep-mask (1 = segment kept).
using MaskModel = std::function<std::vector<double>(const std::vector<std::vector<std::uint8_t>>&)>;

// Perturbed images keep the pixels of segments with mask 1 and replace the
// rest with the image's per-channel mean colour. Calls `predict` in chunks of
// `batch_size` and reads column `class_index`. Failures of the predictor or a
// malformed result surface as ModelCallFailure.
MaskModel image_mask_model(const BatchPredictor& predict, const PixelArray& img, const SuperpixelMap& seg,
                           int class_index, int batch_size = 32);

PixelArray apply_mask(const PixelArray& img, const SuperpixelMap& seg, const std::vector<std::uint8_t>& mask);

struct LimeConfig {
  int n_samples = 1000;
  int top_k = 5;
  double kernel_width = 0.25;
  double ridge_lambda = 1.0;
  // Use all 2^S masks instead of sampling (S <= 16).
  bool exhaustive = false;
  std::uint64_t seed = 0;
  int batch_size = 32;
};

struct LimeExplanation {
  int class_index = 0;
  std::vector<double> weights;
  double intercept = 0.0;
  double fit_r2 = 0.0;
  double lambda_used = 0.0;
  std::vector<int> top_segments;
  std::vector<std::string> warnings;
};

// Kernel weight exp(-d^2 / width^2), d the cosine distance from all-ones.
double lime_kernel(const std::vector<std::uint8_t>& mask, double kernel_width);

// Weighted ridge surrogate of `model` over segment masks; the intercept is not
// penalised. A singular system retries with a larger lambda and is flagged.
LimeExplanation lime_from_masks(const MaskModel& model, int segments, const LimeConfig& config);

struct ShapConfig {
  int n_permutations = 200;
  // Exact subset enumeration at or below this many segments.
  int exact_max_segments = 12;
  std::uint64_t seed = 0;
  int batch_size = 32;
};

struct ShapExplanation {
  int class_index = 0;
  std::vector<double> attributions;
  double baseline_value = 0.0;
  double prediction_value = 0.0;
  bool exact = false;
  int permutations = 0;
};

ShapExplanation shap_from_masks(const MaskModel& model, int segments, const ShapConfig& config);
ShapExplanation shap_exact(const MaskModel& model, int segments);
ShapExplanation shap_sampled(const MaskModel& model, int segments, int n_permutations, std::uint64_t seed);

// Argmax class of the unperturbed image.
int predicted_class(const BatchPredictor& predict, const PixelArray& img);

// `class_index` < 0 explains the predicted class.
LimeExplanation lime_explain(const BatchPredictor& predict, const PixelArray& img, const SuperpixelMap& seg,
                             int class_index, const LimeConfig& config);
ShapExplanation shap_explain(const BatchPredictor& predict, const PixelArray& img, const SuperpixelMap& seg,
                             int class_index, const ShapConfig& config);

inline constexpr std::uint8_t kOutline[3] = {255, 255, 0};

// Original image with a two pixel yellow line straddling the border of the
// union of `top_segments`. An empty selection returns the image unchanged.
PixelArray lime_overlay(const PixelArray& img, const SuperpixelMap& seg, const std::vector<int>& top_segments);

// Each pixel tinted red (positive) or blue (negative) by its segment's
// attribution over a symmetric scale; max |attribution| blends at 0.5.
PixelArray shap_heatmap(const PixelArray& img, const SuperpixelMap& seg, const std::vector<double>& attributions);

// Both write 8-bit PNGs and return any warnings.
std::vector<std::string> render_lime_overlay(const PixelArray& img, const LimeExplanation& e,
                                             const SuperpixelMap& seg, const std::filesystem::path& out_path);
std::vector<std::string> render_shap_heatmap(const PixelArray& img, const ShapExplanation& e,
                                             const SuperpixelMap& seg, const std::filesystem::path& out_path);

nlohmann::json to_json(const LimeExplanation& e, const std::string& image_id, const std::string& class_name,
                       std::uint64_t seed);
nlohmann::json to_json(const ShapExplanation& e, const std::string& image_id, const std::string& class_name,
                       std::uint64_t seed);

}  // namespace skinlab::xai
