#include <chrono>
#include <cmath>
#include <cstring>
#include <set>

#include "doctest.h"
#include "skinlab/classifier.hpp"
#include "skinlab/error.hpp"
#include "skinlab/nn/container.hpp"
#include "skinlab/rng.hpp"
#include "test_util.hpp"

using namespace skinlab;
using namespace skinlab::classifier;
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

ClassifierConfig tiny_config(int k) {
  ClassifierConfig c;
  c.num_classes = k;
  c.backbone = Backbone::Tiny;
  c.lr = 3e-3;
  c.batch_size = 16;
  c.max_epochs = 50;
  c.patience = 50;
  c.seed = 4;
  return c;
}

// 7 toy classes x 10 images, held in memory at 64x64.
struct ToySets {
  TempDir dir{"clf"};
  MemoryImageSet train, validation;
  std::vector<std::string> names;

  ToySets() {
    const auto m = data::generate_toy_dataset(dir.path(), 7, std::vector<long>(7, 13), 21);
    std::map<int, int> seen;
    for (const auto& r : m.records) {
      auto img = resize_image(load_image(m.resolve(r)), 64, 64);
      if (seen[r.label.index]++ < 10)
        train.add(r.image_id, img, r.label.index);
      else
        validation.add(r.image_id, img, r.label.index);
    }
    for (const auto& c : m.class_set) names.push_back(c.name);
  }
};

ToySets& toy() {
  static ToySets t;
  return t;
}

// Independent scan of a val-loss series: first strict minimum, and the epoch at
// which `patience` non-improving epochs have accumulated.
std::pair<int, int> scan_stop(const std::vector<double>& losses, int patience) {
  int best = 0;
  for (std::size_t i = 1; i < losses.size(); ++i)
    if (losses[i] < losses[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  int best_so_far = 0;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    if (losses[i] < losses[static_cast<std::size_t>(best_so_far)]) best_so_far = static_cast<int>(i);
    if (static_cast<int>(i) - best_so_far >= patience) return {best_so_far + 1, static_cast<int>(i) + 1};
  }
  return {best + 1, static_cast<int>(losses.size())};
}

}  // namespace

TEST_CASE("resnet50: torchvision layout and head-only trainable parameters") {
  ClassifierConfig cfg;
  cfg.num_classes = 7;
  auto model = build_model(cfg, std::nullopt, true);
  CHECK(nn::count_parameters(model->backbone(), false) == 23508032);
  const std::size_t head = (2048 * 256 + 256) + (256 * 7 + 7);
  CHECK(model->trainable_count() == head);
  CHECK(nn::count_parameters(model->head(), false) == head);

  std::set<std::string> names;
  for (const auto& nt : nn::named_tensors(model->backbone())) names.insert(nt.name);
  for (const char* n : {"conv1.weight", "bn1.running_var", "layer1.0.downsample.0.weight", "layer2.3.conv2.weight",
                        "layer3.5.bn3.bias", "layer4.2.conv3.weight", "layer4.0.downsample.1.running_mean"})
    CHECK_MESSAGE(names.count(n) == 1, n);
  CHECK(names.count("layer1.1.downsample.0.weight") == 0);

  const auto logits = model->forward(nn::Tensor({1, 3, 224, 224}, 0.1f), nn::Mode::Eval);
  CHECK(logits.shape() == std::vector<int>{1, 7});
  CHECK(code_of([&] { model->forward(nn::Tensor({1, 3, 64, 64}), nn::Mode::Eval); }) == ErrorCode::ShapeMismatch);

  SUBCASE("pretrained weights") {
    TempDir dir("weights");
    CHECK(code_of([&] { build_model(cfg, std::nullopt); }) == ErrorCode::WeightsUnavailable);
    CHECK(code_of([&] { build_model(cfg, dir / "absent.ckpt"); }) == ErrorCode::WeightsUnavailable);
    nn::Container c;
    c.tensors = nn::export_weights(model->backbone());
    c.tensors.emplace("fc.weight", nn::Tensor({1000, 2048}));  // classifier of the source model, ignored
    nn::write_container(dir / "resnet50.ckpt", c);
    ClassifierConfig other = cfg;
    other.seed = 99;
    auto loaded = build_model(other, dir / "resnet50.ckpt");
    CHECK(loaded->backbone_checksum() == model->backbone_checksum());
    c.tensors.erase("layer3.1.conv1.weight");
    nn::write_container(dir / "partial.ckpt", c);
    CHECK(code_of([&] { build_model(cfg, dir / "partial.ckpt"); }) == ErrorCode::WeightsUnavailable);
  }
}

TEST_CASE("softmax and cross-entropy") {
  const auto uniform = softmax(nn::Tensor({2, 4}, 3.0f));
  for (float v : uniform.values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-7));
  const auto two = softmax(nn::Tensor({1, 2}, std::vector<float>{static_cast<float>(std::log(2.0)), 0.0f}));
  CHECK(two[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-6));
  CHECK(two[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-6));

  Rng rng(5);
  nn::Tensor logits({6, 5});
  for (float& v : logits.values()) v = static_cast<float>(rng.normal(0, 4));
  const auto p = softmax(logits);
  for (int i = 0; i < 6; ++i) {
    double s = 0.0;
    for (int j = 0; j < 5; ++j) {
      CHECK(p[static_cast<std::size_t>(i * 5 + j)] >= 0.0f);
      s += p[static_cast<std::size_t>(i * 5 + j)];
    }
    CHECK(std::abs(s - 1.0) < 1e-6);
  }

  const std::vector<int> labels{0, 4, 2, 2, 1, 3};
  nn::Tensor grad;
  const double loss = cross_entropy(logits, labels, &grad);
  double manual = 0.0;
  for (int i = 0; i < 6; ++i) manual -= std::log(p[static_cast<std::size_t>(i * 5 + labels[static_cast<std::size_t>(i)])]);
  CHECK(loss == doctest::Approx(manual / 6).epsilon(1e-5));
  for (std::size_t i = 0; i < logits.numel(); i += 7) {
    nn::Tensor up = logits, down = logits;
    up[i] += 1e-2f;
    down[i] -= 1e-2f;
    const double fd = (cross_entropy(up, labels) - cross_entropy(down, labels)) / 2e-2;
    CHECK(grad[i] == doctest::Approx(fd).epsilon(2e-3).scale(1e-3));
  }
}

TEST_CASE("early stopping") {
  SUBCASE("crafted trace") {
    EarlyStopping es(5);
    const std::vector<double> seq{1.0, 0.9, 0.95, 0.96, 0.97, 0.98, 0.99};
    int stopped = 0;
    for (double v : seq) {
      const bool stop = es.update(v);
      if (stop) {
        stopped = es.epochs_seen();
        break;
      }
    }
    CHECK(stopped == 7);
    CHECK(es.best_epoch() == 2);
  }
  SUBCASE("monotone improvement never stops") {
    EarlyStopping es(5);
    bool any = false;
    for (int e = 0; e < 30; ++e) any |= es.update(1.0 / (e + 1));
    CHECK_FALSE(any);
    CHECK(es.best_epoch() == 30);
  }
  SUBCASE("agrees with an independent scan on random series") {
    Rng rng(17);
    for (int trial = 0; trial < 200; ++trial) {
      const int patience = 1 + static_cast<int>(rng.below(6));
      std::vector<double> seq;
      for (int e = 0; e < 30; ++e) seq.push_back(std::round(rng.uniform(0, 10)) / 10);
      EarlyStopping es(patience);
      int stop_at = 30;
      for (std::size_t i = 0; i < seq.size(); ++i)
        if (es.update(seq[i])) {
          stop_at = static_cast<int>(i) + 1;
          break;
        }
      const auto [best, stop] = scan_stop(std::vector<double>(seq.begin(), seq.begin() + stop_at), patience);
      CHECK(es.best_epoch() == best);
      CHECK(stop_at == stop);
    }
  }
}

TEST_CASE("evaluation pipeline is deterministic and augmentation is train-only") {
  auto& t = toy();
  const std::vector<std::size_t> idx{0, 3, 5};
  const auto a = prepare_batch(t.validation, idx, 64, std::nullopt);
  CHECK(prepare_batch(t.validation, idx, 64, std::nullopt) == a);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto ref = normalize_for_classifier(t.validation.image(idx[k]));
    CHECK(std::memcmp(a.data() + k * ref.values().size(), ref.values().data(), ref.values().size() * sizeof(float)) == 0);
  }
  const auto aug1 = prepare_batch(t.train, idx, 64, 7u);
  CHECK(prepare_batch(t.train, idx, 64, 7u) == aug1);
  CHECK(prepare_batch(t.train, idx, 64, 8u) != aug1);
  CHECK(aug1.shape() == std::vector<int>{3, 3, 64, 64});
  CHECK(prepare_batch(t.train, idx, 224, std::nullopt).shape() == std::vector<int>{3, 3, 224, 224});
}

TEST_CASE("tiny backbone: head-only overfit, frozen base, checkpoint reload") {
  auto& t = toy();
  TempDir out("clf_run");
  // Plain overfit run: no augmentation, statistics of the random backbone
  // estimated once before training.
  auto cfg = tiny_config(7);
  cfg.augment = false;
  auto model = build_model(cfg, std::nullopt);
  calibrate_batch_norm(*model, t.train);
  const auto checksum = model->backbone_checksum();
  const std::size_t head = (128 * 256 + 256) + (256 * 7 + 7);
  CHECK(model->trainable_count() == head);

  const auto start = std::chrono::steady_clock::now();
  double best_train_acc = 0.0;
  int reached_at = 0;
  ClassifierHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& e) {
    best_train_acc = std::max(best_train_acc, e.train_acc);
    if (!reached_at && e.train_acc >= 0.95) reached_at = e.epoch;
  };
  auto outcome = train_classifier(*model, t.train, t.validation, t.names, out.path(), hooks);
  MESSAGE("overfit: best train acc " << best_train_acc << ", first >= 0.95 at epoch " << reached_at << ", "
                                     << std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()
                                     << " s");
  CHECK(t.train.size() == 70);
  CHECK(reached_at > 0);
  CHECK(reached_at <= 50);
  CHECK(model->backbone_checksum() == checksum);

  const auto& h = outcome.history;
  std::vector<double> val;
  for (const auto& e : h.epochs) val.push_back(e.val_loss);
  CHECK(h.best_epoch == scan_stop(val, cfg.patience).first);
  CHECK(std::filesystem::exists(out / "training_history.csv"));
  REQUIRE(std::filesystem::exists(out / "clf_best.ckpt"));

  const auto loaded = load_checkpoint(out / "clf_best.ckpt");
  CHECK(loaded.class_names == t.names);
  CHECK(loaded.history == h);
  auto reloaded = restore_model(loaded);
  const auto probe = prepare_batch(t.validation, {0, 1, 2, 3, 4, 5, 6, 7}, 64, std::nullopt);
  const auto pa = predict_proba(*model, probe), pb = predict_proba(*reloaded, probe);
  CHECK(std::memcmp(pa.data(), pb.data(), pa.numel() * sizeof(float)) == 0);

  // Best-epoch weights were restored: validation loss now equals the best recorded one.
  const auto probs = predict_proba(*model, t.validation, cfg.batch_size);
  double vloss = 0.0;
  for (std::size_t i = 0; i < t.validation.size(); ++i)
    vloss -= std::log(std::max(1e-30f, probs[i * 7 + static_cast<std::size_t>(t.validation.label(i))]));
  vloss /= static_cast<double>(t.validation.size());
  CHECK(vloss == doctest::Approx(h.epochs[static_cast<std::size_t>(h.best_epoch - 1)].val_loss).epsilon(1e-4));
}

TEST_CASE("early stop inside training and input contracts") {
  auto& t = toy();
  auto cfg = tiny_config(7);
  cfg.lr = 0.5;  // overshoots quickly so validation loss stops improving
  cfg.max_epochs = 30;
  cfg.patience = 2;
  auto model = build_model(cfg, std::nullopt);
  const auto outcome = train_classifier(*model, t.train, t.validation, t.names);
  const auto& h = outcome.history;
  std::vector<double> val;
  for (const auto& e : h.epochs) val.push_back(e.val_loss);
  const auto [best, stop] = scan_stop(val, cfg.patience);
  CHECK(h.best_epoch == best);
  CHECK(static_cast<int>(h.epochs.size()) == stop);
  CHECK(h.stopped_early == (stop < cfg.max_epochs));

  MemoryImageSet empty;
  CHECK(code_of([&] { train_classifier(*model, empty, t.validation, t.names); }) == ErrorCode::EmptySplit);
  CHECK(code_of([&] { train_classifier(*model, t.train, empty, t.names); }) == ErrorCode::EmptySplit);
  auto bad = cfg;
  bad.patience = 40;
  CHECK(code_of([&] { bad.validate(); }) == ErrorCode::BadSpec);
}
