#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "skinlab/data.hpp"
#include "skinlab/image.hpp"
#include "skinlab/nn/layers.hpp"

namespace skinlab::classifier {

inline constexpr int kClassifierCheckpointSchema = 1;

enum class Backbone { ResNet50, Tiny };

std::string_view to_string(Backbone b);
Backbone backbone_from_string(std::string_view s);

struct ClassifierConfig {
  int num_classes = 7;
  Backbone backbone = Backbone::ResNet50;
  bool freeze_base = true;
  int hidden = 256;
  float dropout = 0.3f;
  double lr = 1e-5;
  int batch_size = 64;
  int max_epochs = 30;
  int patience = 5;
  bool augment = true;
  std::uint64_t seed = 0;

  int input_size() const { return backbone == Backbone::Tiny ? 64 : 224; }
  void validate() const;
};

nlohmann::json to_json(const ClassifierConfig& c);
ClassifierConfig classifier_config_from_json(const nlohmann::json& j);

// Backbone feature extractor plus GAP -> dense(hidden) -> ReLU -> dropout ->
// dense(K) head. Backbone tensors carry torchvision names under "backbone.",
// head tensors live under "head.".
class ClassifierModel {
 public:
  explicit ClassifierModel(const ClassifierConfig& config);

  // Logits [N, K]. A frozen backbone always runs in eval mode.
  nn::Tensor forward(const nn::Tensor& x, nn::Mode mode);
  // Back-propagates through the head, and through the backbone unless frozen.
  void backward(const nn::Tensor& grad_logits);

  nn::Sequential& backbone() { return *backbone_; }
  nn::Sequential& head() { return *head_; }
  const ClassifierConfig& config() const { return config_; }

  std::map<std::string, nn::Tensor> export_weights();
  void import_weights(const std::map<std::string, nn::Tensor>& weights);
  std::vector<nn::Parameter*> trainable_parameters();
  std::size_t trainable_count();
  std::uint64_t backbone_checksum();

 private:
  ClassifierConfig config_;
  std::unique_ptr<nn::Sequential> backbone_;
  std::unique_ptr<nn::Sequential> head_;
};

// Torchvision-layout ResNet-50 up to layer4 (2048 channels at stride 32).
std::unique_ptr<nn::Sequential> build_resnet50(std::uint64_t init_seed);
// Four basic residual blocks, 16->128 channels, for 64x64 inputs.
std::unique_ptr<nn::Sequential> build_tiny_backbone(std::uint64_t init_seed);

// Builds the model. A ResNet-50 needs `pretrained` (a container holding the
// torchvision tensor names) unless `random_init` is set; missing weights throw
// WeightsUnavailable. The tiny backbone is always randomly initialised.
std::unique_ptr<ClassifierModel> build_model(const ClassifierConfig& config,
                                             const std::optional<std::filesystem::path>& pretrained,
                                             bool random_init = false);

nn::Tensor softmax(const nn::Tensor& logits);
// Mean cross-entropy of softmax(logits) against integer labels; `grad` gets
// d(loss)/d(logits).
double cross_entropy(const nn::Tensor& logits, const std::vector<int>& labels, nn::Tensor* grad = nullptr);

// Patience counts epochs since the last strict improvement of the monitored loss.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {}
  // Returns true when training should stop after this epoch.
  bool update(double val_loss);
  bool improved() const { return improved_; }
  int best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_; }
  int epochs_seen() const { return epoch_; }

 private:
  int patience_;
  int epoch_ = 0;
  int best_epoch_ = 0;
  int since_best_ = 0;
  bool improved_ = false;
  double best_ = 0.0;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainingHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  bool stopped_early = false;
  friend bool operator==(const TrainingHistory&, const TrainingHistory&) = default;
};

nlohmann::json to_json(const TrainingHistory& h);
TrainingHistory history_from_json(const nlohmann::json& j);
void write_history_csv(const std::filesystem::path& path, const TrainingHistory& h);

// Labelled images in unit range at any resolution.
class ImageSet {
 public:
  virtual ~ImageSet() = default;
  virtual std::size_t size() const = 0;
  virtual PixelArray image(std::size_t i) const = 0;
  virtual int label(std::size_t i) const = 0;
  virtual std::string id(std::size_t i) const = 0;
};

class MemoryImageSet final : public ImageSet {
 public:
  void add(std::string id, PixelArray img, int label);
  std::size_t size() const override { return images_.size(); }
  PixelArray image(std::size_t i) const override { return images_.at(i); }
  int label(std::size_t i) const override { return labels_.at(i); }
  std::string id(std::size_t i) const override { return ids_.at(i); }

 private:
  std::vector<std::string> ids_;
  std::vector<PixelArray> images_;
  std::vector<int> labels_;
};

// Records of one split, loaded from disk on demand. With `cache_size` set,
// images are resized once and kept in memory.
class ManifestImageSet final : public ImageSet {
 public:
  ManifestImageSet(const data::DatasetManifest& manifest, const data::SplitManifest& split, data::Split which,
                   std::optional<int> cache_size = std::nullopt);
  std::size_t size() const override { return records_.size(); }
  PixelArray image(std::size_t i) const override;
  int label(std::size_t i) const override { return records_.at(i).label.index; }
  std::string id(std::size_t i) const override { return records_.at(i).image_id; }

 private:
  const data::DatasetManifest* manifest_;
  std::vector<data::ImageRecord> records_;
  std::vector<PixelArray> cache_;
};

// resize -> (train only) augment -> backbone normalization, stacked to NCHW.
nn::Tensor prepare_batch(const ImageSet& set, const std::vector<std::size_t>& indices, int size,
                         std::optional<std::uint64_t> augment_seed);

// Re-estimates the backbone's batch-norm running statistics from up to 256
// evenly spaced, un-augmented images of `set`. Meant for randomly initialised
// backbones, whose default statistics (0 mean, unit variance) do not describe
// their activations. Convolution weights are untouched.
void calibrate_batch_norm(ClassifierModel& model, const ImageSet& set, int passes = 40);

struct ModelCheckpoint {
  std::map<std::string, nn::Tensor> weights;
  ClassifierConfig config;
  std::vector<std::string> class_names;  // index -> label
  TrainingHistory history;
};

void save_checkpoint(const std::filesystem::path& path, const ModelCheckpoint& ckpt);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);
std::unique_ptr<ClassifierModel> restore_model(const ModelCheckpoint& ckpt);

struct TrainOutcome {
  ModelCheckpoint checkpoint;
  TrainingHistory history;
};

struct ClassifierHooks {
  std::function<void(const EpochRecord&)> on_epoch;
};

// Head (or full) training with cross-entropy and Adam, early stopping on
// validation loss and best-epoch weights restored into the result. Writes
// clf_best.ckpt and training_history.csv when out_dir is given.
TrainOutcome train_classifier(ClassifierModel& model, const ImageSet& train, const ImageSet& validation,
                              const std::vector<std::string>& class_names,
                              const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                              ClassifierHooks hooks = {});

// Softmax rows for a prepared batch [N, 3, S, S]; ShapeMismatch otherwise.
nn::Tensor predict_proba(ClassifierModel& model, const nn::Tensor& batch);
// Over a whole set in fixed batches of `batch_size`, no augmentation.
nn::Tensor predict_proba(ClassifierModel& model, const ImageSet& set, int batch_size = 32);

}  // namespace skinlab::classifier
