#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include "doctest.h"
#include "skinlab/error.hpp"
#include "skinlab/gan.hpp"
#include "test_util.hpp"

using namespace skinlab;
using namespace skinlab::gan;
using skinlab::testing::TempDir;

namespace {

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no skinlab::Error thrown");
  return ErrorCode::ConfigError;
}

// 64 images of toy class_1, loaded through the training-split loader.
struct ToyClass {
  TempDir dir{"gan"};
  data::DatasetManifest manifest;
  data::SplitManifest split;
  ClassImages cls;

  ToyClass() {
    manifest = data::generate_toy_dataset(dir.path(), 2, {12, 92}, 5);
    split = data::stratified_split(manifest, {0.70, 0.15, 0.15}, 5);
    // 92 records at 70% leave 64 in train.
    cls = load_class_images(manifest, split, "class_1");
  }
};

ToyClass& toy() {
  static ToyClass t;
  return t;
}

GanTrainConfig small_config() {
  GanTrainConfig c;
  c.generator.base_channels = 64;
  c.discriminator.base_channels = 16;
  c.batch_size = 16;
  c.epochs = 2;
  c.seed = 9;
  return c;
}

std::vector<PixelArray> first(const std::vector<PixelArray>& all, std::size_t n) {
  return {all.begin(), all.begin() + static_cast<long>(std::min(n, all.size()))};
}

}  // namespace

TEST_CASE("generator: shape, range and determinism") {
  auto g = build_generator(GeneratorSpec{}, 1);
  const auto z = sample_latent(64, 100, 3);
  const auto out = generate(*g, z);
  CHECK(out.shape() == std::vector<int>{64, 3, 128, 128});
  float max_abs = 0.0f;
  for (float v : out.values()) max_abs = std::max(max_abs, std::abs(v));
  CHECK(max_abs <= 1.0f);
  CHECK(generate(*g, z) == out);
  CHECK(sample_latent(64, 100, 3).vectors == z.vectors);

  SUBCASE("range holds for extreme weights and latents") {
    auto g2 = build_generator(GeneratorSpec{.base_channels = 32}, 2);
    for (auto& nt : nn::named_tensors(*g2))
      if (nt.param)
        for (float& v : nt.tensor->values()) v *= 50.0f;
    auto big = sample_latent(4, 100, 4);
    for (float& v : big.vectors.values()) v *= 100.0f;
    float worst = 0.0f;
    for (float v : generate(*g2, big).values()) worst = std::max(worst, std::abs(v));
    CHECK(worst <= 1.0f);
  }

  SUBCASE("batch norm after every upsampling stage but the last") {
    auto& seq = *g;
    std::vector<std::string> names;
    for (std::size_t i = 0; i < seq.size(); ++i) names.push_back(seq.name_at(i));
    for (int s = 1; s <= 4; ++s) CHECK(seq.find("bn" + std::to_string(s)) != nullptr);
    CHECK(seq.find("bn5") == nullptr);
    CHECK(names.back() == "tanh");
    auto* up5 = dynamic_cast<nn::ConvTranspose2d*>(seq.find("up5"));
    REQUIRE(up5);
    CHECK(up5->in_channels() == 32);
    CHECK(up5->out_channels() == 3);
  }

  SUBCASE("bad specs") {
    CHECK(code_of([] { build_generator(GeneratorSpec{.out_size = 100}); }) == ErrorCode::BadSpec);
    CHECK(code_of([] { build_generator(GeneratorSpec{.nz = 0}); }) == ErrorCode::BadSpec);
    CHECK(code_of([] { build_generator(GeneratorSpec{.base_channels = 40}); }) == ErrorCode::BadSpec);
  }
}

TEST_CASE("discriminator: sigmoid scalars, channel doubling, input contract") {
  auto d = build_discriminator(DiscriminatorSpec{}, 1);
  auto g = build_generator(GeneratorSpec{.base_channels = 64}, 1);
  const auto p = d->forward(generate(*g, sample_latent(64, 100, 1)), nn::Mode::Eval);
  CHECK(p.shape() == std::vector<int>{64, 1});
  for (float v : p.values()) {
    CHECK(v > 0.0f);
    CHECK(v < 1.0f);
  }

  auto channels = [](nn::Sequential& net) {
    std::vector<int> out;
    for (std::size_t i = 0; i < net.size(); ++i)
      if (auto* c = dynamic_cast<nn::Conv2d*>(&net.at(i))) out.push_back(c->out_channels());
    return out;
  };
  auto d2 = build_discriminator(DiscriminatorSpec{.base_channels = 128}, 1);
  const auto a = channels(*d), b = channels(*d2);
  CHECK(a == std::vector<int>{64, 128, 256, 512});
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == 2 * a[i]);
  CHECK(d->find("bn1") == nullptr);
  for (int s = 2; s <= 4; ++s) CHECK(d->find("bn" + std::to_string(s)) != nullptr);

  CHECK(code_of([&] { d->forward(nn::Tensor({2, 3, 64, 64}), nn::Mode::Eval); }) == ErrorCode::BadSpec);
  CHECK(code_of([&] { d->forward(nn::Tensor({2, 1, 128, 128}), nn::Mode::Eval); }) == ErrorCode::BadSpec);
}

TEST_CASE("bce with smoothing: closed forms") {
  CHECK(std::abs(bce_with_smoothing(0.5, 0.9) - 0.6931) < 1e-4);
  CHECK(std::abs(bce_with_smoothing(0.5, 0.9) - std::log(2.0)) < 1e-12);
  CHECK(std::abs(bce_with_smoothing(0.9, 0.9) - 0.3251) < 1e-4);
  CHECK(std::abs(bce_with_smoothing(0.9, 0.9) + (0.9 * std::log(0.9) + 0.1 * std::log(0.1))) < 1e-12);
  double prev = 1.0;
  for (double eps : {1e-2, 1e-4, 1e-6}) {
    const double v = bce_with_smoothing(1 - eps, 1 - eps);
    CHECK(v < prev);
    prev = v;
  }
  CHECK(prev < 1e-4);
  CHECK(std::isfinite(bce_with_smoothing(0.0, 1.0)));
  CHECK(std::isfinite(bce_with_smoothing(1.0, 0.0)));
  CHECK(bce_with_smoothing(0.0, 1.0) == doctest::Approx(-std::log(1e-7)));
}

TEST_CASE("class loader reads only the requested class's training images") {
  auto& t = toy();
  CHECK(t.cls.images.size() == 64);
  std::set<std::string> train_ids;
  for (const auto& id : t.split.ids_in(data::Split::Train)) train_ids.insert(id);
  for (const auto& id : t.cls.ids) {
    CHECK(train_ids.count(id) == 1);
    CHECK(id.starts_with("toy_01_"));
  }
  for (const auto& img : t.cls.images) {
    CHECK(img.range() == RangeTag::Signed);
    CHECK(img.height() == 128);
    CHECK(img.within_bounds());
  }
}

TEST_CASE("dcgan smoke run: 64 images, 2 epochs, default networks") {
  auto& t = toy();
  TempDir out("gan_smoke");
  GanTrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 3;
  const auto start = std::chrono::steady_clock::now();
  auto result = train_dcgan("class_1", t.cls.images, cfg, out.path());
  MESSAGE("smoke run took " << std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()
                            << " s");
  const auto& ckpt = result.checkpoint;
  REQUIRE(ckpt.loss_history.size() == 2);
  for (const auto& e : ckpt.loss_history) {
    CHECK(std::isfinite(e.loss_g));
    CHECK(std::isfinite(e.loss_d));
  }
  CHECK(ckpt.epoch == 2);
  const auto file = out / "gan_class_1_2.ckpt";
  REQUIRE(std::filesystem::exists(file));
  CHECK(result.written == std::vector<std::filesystem::path>{file});
  CHECK(std::filesystem::exists(out / "gan_class_1_losses.csv"));

  const auto loaded = load_checkpoint(file);
  CHECK(loaded.class_name == "class_1");
  CHECK(loaded.epoch == 2);
  CHECK(loaded.loss_history == ckpt.loss_history);
  CHECK(loaded.generator_weights == ckpt.generator_weights);
  CHECK(loaded.discriminator_weights == ckpt.discriminator_weights);
  CHECK(to_json(loaded.config) == to_json(cfg));

  const auto probe = sample_latent(8, 100, 77);
  auto g_a = restore_generator(ckpt);
  auto g_b = restore_generator(loaded);
  const auto ya = generate(*g_a, probe), yb = generate(*g_b, probe);
  CHECK(std::memcmp(ya.data(), yb.data(), ya.numel() * sizeof(float)) == 0);
}

TEST_CASE("dcgan determinism and label-smoothing contract") {
  auto& t = toy();
  const auto imgs = first(t.cls.images, 24);
  std::vector<LossCall> calls;
  TrainHooks hooks;
  hooks.on_loss = [&](const LossCall& c) { calls.push_back(c); };
  auto a = train_dcgan("class_1", imgs, small_config(), std::nullopt, hooks);
  auto b = train_dcgan("class_1", imgs, small_config(), std::nullopt);
  CHECK(a.checkpoint.loss_history == b.checkpoint.loss_history);
  CHECK(a.checkpoint.generator_weights == b.checkpoint.generator_weights);

  // 24 images at batch 16: 2 steps per epoch, three loss calls per step.
  REQUIRE(calls.size() == 2u * 2u * 3u);
  std::map<std::string, std::set<float>> targets;
  for (const auto& c : calls) {
    CHECK(c.targets.size() == 16);
    targets[c.role].insert(c.targets.begin(), c.targets.end());
  }
  CHECK(targets["d_real"] == std::set<float>{0.9f});
  CHECK(targets["d_fake"] == std::set<float>{0.4f});
  CHECK(targets["g"] == std::set<float>{1.0f});

  auto other = small_config();
  other.seed = 10;
  auto c = train_dcgan("class_1", imgs, other, std::nullopt);
  CHECK(c.checkpoint.loss_history != a.checkpoint.loss_history);
}

TEST_CASE("small classes are cycled to a full batch") {
  auto& t = toy();
  auto cfg = small_config();
  DcganTrainer trainer("class_1", first(t.cls.images, 5), cfg);
  CHECK(trainer.steps_per_epoch() == 1);
  std::size_t seen = 0;
  TrainHooks hooks;
  hooks.on_loss = [&](const LossCall& c) { seen = std::max(seen, c.targets.size()); };
  DcganTrainer hooked("class_1", first(t.cls.images, 5), cfg, hooks);
  const auto e = hooked.run_epoch();
  CHECK(seen == 16);
  CHECK(std::isfinite(e.loss_d));
  CHECK(DcganTrainer("class_1", first(t.cls.images, 33), cfg).steps_per_epoch() == 3);
}

TEST_CASE("frozen generator: discriminator-only training raises separation") {
  auto& t = toy();
  DcganTrainer trainer("class_1", t.cls.images, small_config());
  const auto g_before = nn::weights_checksum(trainer.generator());
  const double before = trainer.separation();
  for (int e = 0; e < 5; ++e) trainer.run_discriminator_epoch();
  const double after = trainer.separation();
  MESSAGE("separation " << before << " -> " << after);
  CHECK(after > before);
  CHECK(nn::weights_checksum(trainer.generator()) == g_before);
}

TEST_CASE("dcgan input contract and divergence") {
  auto& t = toy();
  CHECK(code_of([] { train_dcgan("x", {}, small_config()); }) == ErrorCode::InsufficientData);
  CHECK(code_of([&] { train_dcgan("x", {to_unit(denormalize_from_gan(t.cls.images[0]))}, small_config()); }) ==
        ErrorCode::RangeTagMismatch);
  CHECK(code_of([&] {
          train_dcgan("x", {normalize_for_gan(resize_image(from_rgb8(std::vector<std::uint8_t>(64 * 64 * 3, 9), 64, 64),
                                                           64, 64))},
                      small_config());
        }) == ErrorCode::BadSpec);
  auto bad_labels = small_config();
  bad_labels.fake_label = 0.95f;
  CHECK(code_of([&] { bad_labels.validate(); }) == ErrorCode::BadSpec);

  TempDir out("gan_div");
  auto poisoned = first(t.cls.images, 4);
  poisoned[1].values()[10] = std::nanf("");
  CHECK(code_of([&] { train_dcgan("x", poisoned, small_config(), out.path()); }) == ErrorCode::Diverged);
  CHECK(std::filesystem::exists(out / "gan_x_0.ckpt"));
  CHECK(load_checkpoint(out / "gan_x_0.ckpt").loss_history.empty());
}
