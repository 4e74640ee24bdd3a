#include "skinlab/gan.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "skinlab/augment.hpp"
#include "skinlab/error.hpp"
#include "skinlab/nn/container.hpp"
#include "skinlab/rng.hpp"

namespace fs = std::filesystem;

namespace skinlab::gan {

using nn::ActivationKind;
using nn::Mode;
using nn::Tensor;

namespace {

int doublings(int size) {
  int n = 0;
  while (size > 4 && size % 2 == 0) {
    size /= 2;
    ++n;
  }
  return size == 4 ? n : -1;
}

// Rejects anything but [N, channels, size, size] with BadSpec.
class InputGuard final : public nn::Layer {
 public:
  InputGuard(int channels, int size) : channels_(channels), size_(size) {}
  Tensor forward(const Tensor& x, Mode /*mode*/) override {
    if (x.rank() != 4 || x.dim(1) != channels_ || x.dim(2) != size_ || x.dim(3) != size_)
      throw Error(ErrorCode::BadSpec, "discriminator expects [N, " + std::to_string(channels_) + ", " +
                                          std::to_string(size_) + ", " + std::to_string(size_) + "], got " +
                                          x.shape_string());
    return x;
  }
  Tensor backward(const Tensor& grad_out) override { return grad_out; }
  std::string describe() const override { return "InputGuard"; }

 private:
  int channels_, size_;
};

void init_weights(nn::Layer& net, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& nt : nn::named_tensors(net)) {
    if (!nt.param) continue;
    const std::string& n = nt.name;
    const bool is_bias = n.ends_with(".bias");
    const bool is_bn = n.find("bn") != std::string::npos;
    for (float& v : nt.tensor->values()) {
      if (is_bn)
        v = is_bias ? 0.0f : static_cast<float>(rng.normal(1.0, 0.02));
      else
        v = is_bias ? 0.0f : static_cast<float>(rng.normal(0.0, 0.02));
    }
  }
}

nn::Tensor stack(const std::vector<const PixelArray*>& imgs) {
  const int h = imgs.front()->height(), w = imgs.front()->width();
  Tensor t({static_cast<int>(imgs.size()), 3, h, w});
  float* out = t.data();
  for (const auto* img : imgs) out = std::copy(img->values().begin(), img->values().end(), out);
  return t;
}

void write_losses_csv(const fs::path& path, const std::vector<LossEntry>& history) {
  std::ostringstream s;
  s.precision(9);
  s << "epoch,loss_G,loss_D\n";
  for (const auto& e : history) s << e.epoch << ',' << e.loss_g << ',' << e.loss_d << '\n';
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
    out << s.str();
  }
  fs::rename(tmp, path);
}

}  // namespace

int GeneratorSpec::stages() const { return doublings(out_size); }

void GeneratorSpec::validate() const {
  if (nz <= 0) throw Error(ErrorCode::BadSpec, "nz must be positive");
  if (out_channels <= 0) throw Error(ErrorCode::BadSpec, "out_channels must be positive");
  const int n = stages();
  if (n < 1) throw Error(ErrorCode::BadSpec, "out_size must be 4 doubled at least once, got " + std::to_string(out_size));
  if (base_channels <= 0 || base_channels % (1 << (n - 1)) != 0)
    throw Error(ErrorCode::BadSpec, "generator base_channels must be a positive multiple of " +
                                        std::to_string(1 << (n - 1)));
}

int DiscriminatorSpec::stages() const {
  const int n = doublings(in_size);
  return n < 2 ? -1 : n - 1;  // stops at 8x8
}

void DiscriminatorSpec::validate() const {
  if (stages() < 1) throw Error(ErrorCode::BadSpec, "in_size must be 4 doubled at least twice, got " +
                                                        std::to_string(in_size));
  if (base_channels <= 0) throw Error(ErrorCode::BadSpec, "discriminator base_channels must be positive");
}

void GanTrainConfig::validate() const {
  generator.validate();
  discriminator.validate();
  if (generator.out_size != discriminator.in_size || generator.out_channels != 3)
    throw Error(ErrorCode::BadSpec, "generator output must match the discriminator input");
  if (!(lr_g > 0 && lr_d > 0)) throw Error(ErrorCode::BadSpec, "learning rates must be positive");
  if (!(0.0f < fake_label && fake_label < real_label && real_label <= 1.0f))
    throw Error(ErrorCode::BadSpec, "labels must satisfy 0 < fake < real <= 1");
  if (batch_size <= 0 || epochs < 0 || checkpoint_every < 0)
    throw Error(ErrorCode::BadSpec, "batch_size must be positive, epochs and checkpoint_every non-negative");
}

nlohmann::json to_json(const GanTrainConfig& c) {
  return {{"lr_g", c.lr_g},
          {"lr_d", c.lr_d},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"real_label", c.real_label},
          {"fake_label", c.fake_label},
          {"generator_label", c.generator_label},
          {"seed", c.seed},
          {"checkpoint_every", c.checkpoint_every},
          {"generator",
           {{"nz", c.generator.nz},
            {"base_channels", c.generator.base_channels},
            {"out_size", c.generator.out_size},
            {"out_channels", c.generator.out_channels}}},
          {"discriminator",
           {{"in_size", c.discriminator.in_size}, {"base_channels", c.discriminator.base_channels}}}};
}

GanTrainConfig gan_config_from_json(const nlohmann::json& j) {
  GanTrainConfig c;
  auto get = [&](const nlohmann::json& obj, const char* key, auto& field) {
    if (obj.contains(key)) obj.at(key).get_to(field);
  };
  get(j, "lr_g", c.lr_g);
  get(j, "lr_d", c.lr_d);
  get(j, "beta1", c.beta1);
  get(j, "beta2", c.beta2);
  get(j, "batch_size", c.batch_size);
  get(j, "epochs", c.epochs);
  get(j, "real_label", c.real_label);
  get(j, "fake_label", c.fake_label);
  get(j, "generator_label", c.generator_label);
  get(j, "seed", c.seed);
  get(j, "checkpoint_every", c.checkpoint_every);
  if (j.contains("generator")) {
    const auto& g = j.at("generator");
    get(g, "nz", c.generator.nz);
    get(g, "base_channels", c.generator.base_channels);
    get(g, "out_size", c.generator.out_size);
    get(g, "out_channels", c.generator.out_channels);
  }
  if (j.contains("discriminator")) {
    const auto& d = j.at("discriminator");
    get(d, "in_size", c.discriminator.in_size);
    get(d, "base_channels", c.discriminator.base_channels);
  }
  return c;
}

std::string GanCheckpoint::id() const { return class_name + "_" + std::to_string(epoch); }

std::string checkpoint_filename(std::string_view class_name, int epoch) {
  return "gan_" + std::string(class_name) + "_" + std::to_string(epoch) + ".ckpt";
}

void save_checkpoint(const fs::path& path, const GanCheckpoint& ckpt) {
  nn::Container c;
  nlohmann::json losses = nlohmann::json::array();
  for (const auto& e : ckpt.loss_history) losses.push_back({e.epoch, e.loss_g, e.loss_d});
  c.header = {{"kind", "gan"},
              {"schema_version", kGanCheckpointSchema},
              {"class_name", ckpt.class_name},
              {"epoch", ckpt.epoch},
              {"config", to_json(ckpt.config)},
              {"loss_history", losses}};
  for (const auto& [name, t] : ckpt.generator_weights) c.tensors.emplace("generator." + name, t);
  for (const auto& [name, t] : ckpt.discriminator_weights) c.tensors.emplace("discriminator." + name, t);
  nn::write_container(path, c);
}

GanCheckpoint load_checkpoint(const fs::path& path) {
  nn::Container c = nn::read_container(path);
  if (c.header.value("kind", "") != "gan" || c.header.value("schema_version", 0) != kGanCheckpointSchema)
    throw Error(ErrorCode::CheckpointMismatch, path.string() + " is not a GAN checkpoint of a supported version");
  GanCheckpoint ckpt;
  ckpt.class_name = c.header.at("class_name").get<std::string>();
  ckpt.epoch = c.header.at("epoch").get<int>();
  ckpt.config = gan_config_from_json(c.header.at("config"));
  for (const auto& e : c.header.at("loss_history"))
    ckpt.loss_history.push_back({e.at(0).get<int>(), e.at(1).get<double>(), e.at(2).get<double>()});
  for (auto& [name, t] : c.tensors) {
    if (name.starts_with("generator."))
      ckpt.generator_weights.emplace(name.substr(10), std::move(t));
    else if (name.starts_with("discriminator."))
      ckpt.discriminator_weights.emplace(name.substr(14), std::move(t));
  }
  return ckpt;
}

LatentBatch sample_latent(int batch, int nz, std::uint64_t seed) {
  if (batch <= 0 || nz <= 0) throw Error(ErrorCode::BadSpec, "latent batch and nz must be positive");
  LatentBatch z{Tensor({batch, nz}), seed};
  Rng rng(seed);
  for (float& v : z.vectors.values()) v = static_cast<float>(rng.normal());
  return z;
}

std::unique_ptr<nn::Sequential> build_generator(const GeneratorSpec& spec, std::uint64_t init_seed) {
  spec.validate();
  auto g = std::make_unique<nn::Sequential>();
  const int b = spec.base_channels;
  g->emplace<nn::Linear>("project", spec.nz, b * 16, false);
  g->emplace<nn::Reshape>("reshape", std::vector<int>{b, 4, 4});
  g->emplace<nn::BatchNorm>("bn0", b);
  g->emplace<nn::Activation>("relu0", ActivationKind::ReLU);
  const int n = spec.stages();
  int in = b;
  for (int s = 1; s <= n; ++s) {
    const bool last = s == n;
    const int out = last ? spec.out_channels : in / 2;
    g->emplace<nn::ConvTranspose2d>("up" + std::to_string(s), in, out, nn::ConvGeometry{4, 2, 1}, false);
    if (!last) {
      g->emplace<nn::BatchNorm>("bn" + std::to_string(s), out);
      g->emplace<nn::Activation>("relu" + std::to_string(s), ActivationKind::ReLU);
    }
    in = out;
  }
  g->emplace<nn::Activation>("tanh", ActivationKind::Tanh);
  init_weights(*g, derive_seed(init_seed, "gan", "init", "generator"));
  return g;
}

std::unique_ptr<nn::Sequential> build_discriminator(const DiscriminatorSpec& spec, std::uint64_t init_seed) {
  spec.validate();
  auto d = std::make_unique<nn::Sequential>();
  d->emplace<InputGuard>("guard", 3, spec.in_size);
  const int n = spec.stages();
  int in = 3, out = spec.base_channels, size = spec.in_size;
  for (int s = 1; s <= n; ++s) {
    d->emplace<nn::Conv2d>("conv" + std::to_string(s), in, out, nn::ConvGeometry{4, 2, 1}, false);
    if (s > 1) d->emplace<nn::BatchNorm>("bn" + std::to_string(s), out);
    d->emplace<nn::Activation>("lrelu" + std::to_string(s), ActivationKind::LeakyReLU, 0.2f);
    in = out;
    out *= 2;
    size /= 2;
  }
  d->emplace<nn::Reshape>("flatten", std::vector<int>{in * size * size});
  d->emplace<nn::Linear>("fc", in * size * size, 1);
  d->emplace<nn::Activation>("sigmoid", ActivationKind::Sigmoid);
  init_weights(*d, derive_seed(init_seed, "gan", "init", "discriminator"));
  return d;
}

std::unique_ptr<nn::Sequential> restore_generator(const GanCheckpoint& ckpt) {
  auto g = build_generator(ckpt.config.generator);
  nn::import_weights(*g, ckpt.generator_weights);
  return g;
}

Tensor generate(nn::Layer& generator, const LatentBatch& latent) { return generator.forward(latent.vectors, Mode::Eval); }

double bce_with_smoothing(double prediction, double target) {
  constexpr double eps = 1e-7;
  const double p = std::clamp(prediction, eps, 1.0 - eps);
  return -(target * std::log(p) + (1.0 - target) * std::log(1.0 - p));
}

ClassImages load_class_images(const data::DatasetManifest& manifest, const data::SplitManifest& split,
                              const std::string& class_name, int size) {
  if (!manifest.find_class(class_name)) throw Error(ErrorCode::UnknownLabel, "no class named " + class_name);
  ClassImages out;
  for (const auto& r : manifest.records) {
    if (r.label.name != class_name || r.source != data::Source::Real) continue;
    auto it = split.assignment.find(r.image_id);
    if (it == split.assignment.end() || it->second != data::Split::Train) continue;
    out.ids.push_back(r.image_id);
    out.images.push_back(normalize_for_gan(resize_image(load_image(manifest.resolve(r)), size, size)));
  }
  return out;
}

DcganTrainer::DcganTrainer(std::string class_name, std::vector<PixelArray> images, GanTrainConfig config,
                           TrainHooks hooks)
    : class_name_(std::move(class_name)), images_(std::move(images)), config_(std::move(config)),
      hooks_(std::move(hooks)) {
  config_.validate();
  if (images_.empty()) throw Error(ErrorCode::InsufficientData, "class " + class_name_ + " has no training images");
  const int size = config_.generator.out_size;
  for (const auto& img : images_) {
    if (img.range() != RangeTag::Signed) throw Error(ErrorCode::RangeTagMismatch, "GAN images must be in [-1, 1]");
    if (img.height() != size || img.width() != size)
      throw Error(ErrorCode::BadSpec, "GAN images must be " + std::to_string(size) + "x" + std::to_string(size));
  }
  g_ = build_generator(config_.generator, derive_seed(config_.seed, class_name_));
  d_ = build_discriminator(config_.discriminator, derive_seed(config_.seed, class_name_));
  opt_g_ = std::make_unique<nn::Adam>(nn::parameters(*g_), nn::AdamConfig{config_.lr_g, config_.beta1, config_.beta2});
  opt_d_ = std::make_unique<nn::Adam>(nn::parameters(*d_), nn::AdamConfig{config_.lr_d, config_.beta1, config_.beta2});
}

int DcganTrainer::steps_per_epoch() const {
  const auto n = static_cast<long>(images_.size());
  return static_cast<int>(std::max(1L, (n + config_.batch_size - 1) / config_.batch_size));
}

Tensor DcganTrainer::real_batch(int step) {
  // The epoch's draw order is a concatenation of shuffled passes over the
  // class, long enough to fill every step.
  const std::size_t need = static_cast<std::size_t>(steps_per_epoch()) * config_.batch_size;
  if (step == 0) {
    order_.clear();
    for (int pass = 0; order_.size() < need; ++pass) {
      std::vector<std::size_t> idx(images_.size());
      std::iota(idx.begin(), idx.end(), 0);
      Rng rng(derive_seed(config_.seed, class_name_, "order", static_cast<std::uint64_t>(epoch_),
                          static_cast<std::uint64_t>(pass)));
      rng.shuffle(std::span(idx));
      order_.insert(order_.end(), idx.begin(), idx.end());
    }
  }
  std::vector<PixelArray> augmented;
  augmented.reserve(config_.batch_size);
  for (int i = 0; i < config_.batch_size; ++i) {
    const std::size_t slot = static_cast<std::size_t>(step) * config_.batch_size + i;
    augmented.push_back(gan_augment(images_[order_[slot]],
                                    derive_seed(config_.seed, class_name_, "augment",
                                                static_cast<std::uint64_t>(epoch_), static_cast<std::uint64_t>(slot))));
  }
  std::vector<const PixelArray*> ptrs;
  for (const auto& a : augmented) ptrs.push_back(&a);
  return stack(ptrs);
}

double DcganTrainer::batch_loss(const std::string& role, const Tensor& p, float target, Tensor& grad) {
  // d(mean bce)/dp; the clamp keeps the ratio finite when p saturates.
  const auto n = static_cast<double>(p.numel());
  LossCall call{role, std::vector<float>(p.numel(), target), 0.0};
  grad = Tensor(p.shape());
  double sum = 0.0;
  for (std::size_t i = 0; i < p.numel(); ++i) {
    const double pi = p[i];
    sum += bce_with_smoothing(pi, call.targets[i]);
    const double pc = std::clamp(pi, 1e-7, 1.0 - 1e-7);
    grad[i] = static_cast<float>((pc - call.targets[i]) / (pc * (1.0 - pc)) / n);
  }
  call.value = sum / n;
  if (hooks_.on_loss) hooks_.on_loss(call);
  return call.value;
}

double DcganTrainer::discriminator_step(int step, const Tensor& fake) {
  Tensor grad;
  nn::zero_grad(*d_);
  const Tensor real = real_batch(step);
  const double loss_real = batch_loss("d_real", d_->forward(real, Mode::Train), config_.real_label, grad);
  d_->backward(grad);
  const double loss_fake = batch_loss("d_fake", d_->forward(fake, Mode::Train), config_.fake_label, grad);
  d_->backward(grad);
  opt_d_->step();
  return loss_real + loss_fake;
}

LossEntry DcganTrainer::run_epoch() {
  const int steps = steps_per_epoch();
  double sum_g = 0.0, sum_d = 0.0;
  for (int step = 0; step < steps; ++step) {
    const LatentBatch z = sample_latent(config_.batch_size, config_.generator.nz,
                                        derive_seed(config_.seed, class_name_, "latent",
                                                    static_cast<std::uint64_t>(epoch_), static_cast<std::uint64_t>(step)));
    nn::zero_grad(*g_);
    const Tensor fake = g_->forward(z.vectors, Mode::Train);
    sum_d += discriminator_step(step, fake);

    Tensor grad;
    nn::zero_grad(*d_);
    sum_g += batch_loss("g", d_->forward(fake, Mode::Train), config_.generator_label, grad);
    g_->backward(d_->backward(grad));
    opt_g_->step();
  }
  ++epoch_;
  LossEntry e{epoch_, sum_g / steps, sum_d / steps};
  history_.push_back(e);
  if (hooks_.on_epoch) hooks_.on_epoch(e);
  return e;
}

double DcganTrainer::run_discriminator_epoch() {
  const int steps = steps_per_epoch();
  double sum_d = 0.0;
  for (int step = 0; step < steps; ++step) {
    const LatentBatch z = sample_latent(config_.batch_size, config_.generator.nz,
                                        derive_seed(config_.seed, class_name_, "latent",
                                                    static_cast<std::uint64_t>(epoch_), static_cast<std::uint64_t>(step)));
    sum_d += discriminator_step(step, g_->forward(z.vectors, Mode::Eval));
  }
  ++epoch_;
  return sum_d / steps;
}

double DcganTrainer::separation() {
  std::vector<const PixelArray*> ptrs;
  for (const auto& img : images_) ptrs.push_back(&img);
  const Tensor pr = d_->forward(stack(ptrs), Mode::Eval);
  const auto n = static_cast<int>(images_.size());
  const LatentBatch z = sample_latent(n, config_.generator.nz, derive_seed(config_.seed, class_name_, "probe"));
  const Tensor pf = d_->forward(g_->forward(z.vectors, Mode::Eval), Mode::Eval);
  double mean_r = 0.0, mean_f = 0.0;
  for (int i = 0; i < n; ++i) {
    mean_r += pr[static_cast<std::size_t>(i)];
    mean_f += pf[static_cast<std::size_t>(i)];
  }
  return (mean_r - mean_f) / n;
}

GanCheckpoint DcganTrainer::checkpoint() {
  return {class_name_, nn::export_weights(*g_), nn::export_weights(*d_), config_, history_, epoch_};
}

TrainResult train_dcgan(const std::string& class_name, std::vector<PixelArray> images, const GanTrainConfig& config,
                        const std::optional<fs::path>& out_dir, TrainHooks hooks) {
  DcganTrainer trainer(class_name, std::move(images), config, std::move(hooks));
  TrainResult result;
  if (out_dir) {
    std::error_code ec;
    fs::create_directories(*out_dir, ec);
    if (ec) throw Error(ErrorCode::IoFailure, "cannot create " + out_dir->string() + ": " + ec.message());
  }
  auto write = [&](const GanCheckpoint& ckpt) {
    if (!out_dir) return;
    const fs::path p = *out_dir / checkpoint_filename(class_name, ckpt.epoch);
    save_checkpoint(p, ckpt);
    result.written.push_back(p);
  };
  GanCheckpoint last_good = trainer.checkpoint();
  for (int e = 0; e < config.epochs; ++e) {
    const LossEntry entry = trainer.run_epoch();
    if (!std::isfinite(entry.loss_g) || !std::isfinite(entry.loss_d)) {
      write(last_good);
      throw Error(ErrorCode::Diverged, "class " + class_name + " produced a non-finite loss at epoch " +
                                           std::to_string(entry.epoch));
    }
    const bool periodic = config.checkpoint_every > 0 && entry.epoch % config.checkpoint_every == 0;
    const bool final = e + 1 == config.epochs;
    last_good = trainer.checkpoint();
    if (out_dir) {
      write_losses_csv(*out_dir / ("gan_" + class_name + "_losses.csv"), trainer.history());
      if (periodic || final) write(last_good);
    }
  }
  if (config.epochs == 0) write(last_good);
  result.checkpoint = std::move(last_good);
  return result;
}

}  // namespace skinlab::gan
