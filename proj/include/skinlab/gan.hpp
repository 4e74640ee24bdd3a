#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "skinlab/data.hpp"
#include "skinlab/image.hpp"
#include "skinlab/nn/layers.hpp"
#include "skinlab/nn/optim.hpp"

namespace skinlab::gan {

inline constexpr int kGanCheckpointSchema = 1;
inline constexpr int kGanImageSize = 128;

struct GeneratorSpec {
  int nz = 100;
  int base_channels = 512;  // channels at 4x4
  int out_size = 128;
  int out_channels = 3;

  int stages() const;  // number of x2 upsampling stages
  void validate() const;
};

struct DiscriminatorSpec {
  int in_size = 128;
  int base_channels = 64;  // channels of the first strided stage

  int stages() const;
  void validate() const;
};

struct GanTrainConfig {
  double lr_g = 1e-5;
  double lr_d = 1e-5;
  double beta1 = 0.5;
  double beta2 = 0.999;
  int batch_size = 64;
  int epochs = 300;
  float real_label = 0.9f;
  float fake_label = 0.4f;
  float generator_label = 1.0f;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // 0: final checkpoint only
  GeneratorSpec generator;
  DiscriminatorSpec discriminator;

  void validate() const;
};

nlohmann::json to_json(const GanTrainConfig& c);
GanTrainConfig gan_config_from_json(const nlohmann::json& j);

struct LossEntry {
  int epoch = 0;
  double loss_g = 0.0;
  double loss_d = 0.0;
  friend bool operator==(const LossEntry&, const LossEntry&) = default;
};

struct GanCheckpoint {
  std::string class_name;
  std::map<std::string, nn::Tensor> generator_weights;
  std::map<std::string, nn::Tensor> discriminator_weights;
  GanTrainConfig config;
  std::vector<LossEntry> loss_history;
  int epoch = 0;

  // Stable identifier used to tag synthetic records: "<class>_<epoch>".
  std::string id() const;
};

void save_checkpoint(const std::filesystem::path& path, const GanCheckpoint& ckpt);
GanCheckpoint load_checkpoint(const std::filesystem::path& path);
std::string checkpoint_filename(std::string_view class_name, int epoch);

struct LatentBatch {
  nn::Tensor vectors;  // [batch, nz], standard normal
  std::uint64_t seed = 0;
};

LatentBatch sample_latent(int batch, int nz, std::uint64_t seed);

// Weights drawn from N(0, 0.02), batch-norm scales from N(1, 0.02).
std::unique_ptr<nn::Sequential> build_generator(const GeneratorSpec& spec, std::uint64_t init_seed = 0);
std::unique_ptr<nn::Sequential> build_discriminator(const DiscriminatorSpec& spec, std::uint64_t init_seed = 0);

std::unique_ptr<nn::Sequential> restore_generator(const GanCheckpoint& ckpt);
// Eval-mode forward; output [batch, 3, out, out] in [-1, 1].
nn::Tensor generate(nn::Layer& generator, const LatentBatch& latent);

// Per-sample binary cross-entropy with the prediction clamped to [1e-7, 1-1e-7].
double bce_with_smoothing(double prediction, double target);

// One evaluation of the batch loss: which network is being trained and the
// per-sample targets used.
struct LossCall {
  std::string role;  // "d_real", "d_fake" or "g"
  std::vector<float> targets;
  double value = 0.0;
};

struct TrainHooks {
  std::function<void(const LossCall&)> on_loss;
  std::function<void(const LossEntry&)> on_epoch;
};

// Loads the training-split real images of one class, resized to 128x128 and
// mapped to [-1, 1]. Records of other classes are never opened.
struct ClassImages {
  std::vector<std::string> ids;
  std::vector<PixelArray> images;
};
ClassImages load_class_images(const data::DatasetManifest& manifest, const data::SplitManifest& split,
                              const std::string& class_name, int size = kGanImageSize);

// Adversarial trainer for one class. Each step updates D on a real batch
// (target real_label) and a generated batch (target fake_label), then G
// through D with target generator_label. Classes smaller than one batch are
// cycled, every repetition with a fresh augmentation draw.
class DcganTrainer {
 public:
  DcganTrainer(std::string class_name, std::vector<PixelArray> images, GanTrainConfig config,
               TrainHooks hooks = {});

  LossEntry run_epoch();
  // Discriminator-only epoch against the current (frozen) generator.
  double run_discriminator_epoch();
  // mean D(real) - mean D(G(z)) in eval mode over the un-augmented images and
  // a fixed latent probe.
  double separation();

  int epoch() const { return epoch_; }
  int steps_per_epoch() const;
  const std::vector<LossEntry>& history() const { return history_; }
  GanCheckpoint checkpoint();

  nn::Sequential& generator() { return *g_; }
  nn::Sequential& discriminator() { return *d_; }

 private:
  nn::Tensor real_batch(int step);
  double batch_loss(const std::string& role, const nn::Tensor& p, float target, nn::Tensor& grad);
  double discriminator_step(int step, const nn::Tensor& fake);

  std::string class_name_;
  std::vector<PixelArray> images_;
  GanTrainConfig config_;
  TrainHooks hooks_;
  std::unique_ptr<nn::Sequential> g_, d_;
  std::unique_ptr<nn::Adam> opt_g_, opt_d_;
  std::vector<std::size_t> order_;
  int epoch_ = 0;
  std::vector<LossEntry> history_;
};

struct TrainResult {
  GanCheckpoint checkpoint;
  std::vector<std::filesystem::path> written;
};

// Runs config.epochs epochs. When out_dir is set, writes gan_<class>_<epoch>.ckpt
// every checkpoint_every epochs and at the end, and keeps gan_<class>_losses.csv
// current. A non-finite loss writes the last good checkpoint and throws Diverged.
TrainResult train_dcgan(const std::string& class_name, std::vector<PixelArray> images, const GanTrainConfig& config,
                        const std::optional<std::filesystem::path>& out_dir = std::nullopt, TrainHooks hooks = {});

}  // namespace skinlab::gan
