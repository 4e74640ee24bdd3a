#include "skinlab/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "skinlab/augment.hpp"
#include "skinlab/error.hpp"
#include "skinlab/nn/container.hpp"
#include "skinlab/nn/optim.hpp"
#include "skinlab/rng.hpp"

namespace fs = std::filesystem;

namespace skinlab::classifier {

using nn::ActivationKind;
using nn::ConvGeometry;
using nn::Mode;
using nn::Sequential;
using nn::Tensor;

namespace {

// Kaiming-normal (fan_out) convolutions, unit batch norm, uniform(+-1/sqrt(in))
// dense layers: the torchvision defaults.
void init_backbone(nn::Layer& net, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& nt : nn::named_tensors(net)) {
    if (!nt.param) continue;
    const auto& shape = nt.tensor->shape();
    if (shape.size() == 4) {
      const double std = std::sqrt(2.0 / (shape[0] * shape[2] * shape[3]));
      for (float& v : nt.tensor->values()) v = static_cast<float>(rng.normal(0.0, std));
    } else {
      const bool scale = nt.name.ends_with(".weight");
      nt.tensor->fill(scale ? 1.0f : 0.0f);
    }
  }
}

void init_dense(nn::Linear& layer, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(layer.in_features()));
  for (float& v : layer.weight().value.values()) v = static_cast<float>(rng.uniform(-bound, bound));
  if (layer.bias())
    for (float& v : layer.bias()->value.values()) v = static_cast<float>(rng.uniform(-bound, bound));
}

std::unique_ptr<nn::Residual> bottleneck(int in, int planes, int stride) {
  auto main = std::make_unique<Sequential>();
  main->emplace<nn::Conv2d>("conv1", in, planes, ConvGeometry{1, 1, 0}, false);
  main->emplace<nn::BatchNorm>("bn1", planes);
  main->emplace<nn::Activation>("relu1", ActivationKind::ReLU);
  main->emplace<nn::Conv2d>("conv2", planes, planes, ConvGeometry{3, stride, 1}, false);
  main->emplace<nn::BatchNorm>("bn2", planes);
  main->emplace<nn::Activation>("relu2", ActivationKind::ReLU);
  main->emplace<nn::Conv2d>("conv3", planes, planes * 4, ConvGeometry{1, 1, 0}, false);
  main->emplace<nn::BatchNorm>("bn3", planes * 4);
  std::unique_ptr<Sequential> shortcut;
  if (stride != 1 || in != planes * 4) {
    shortcut = std::make_unique<Sequential>();
    shortcut->emplace<nn::Conv2d>("0", in, planes * 4, ConvGeometry{1, stride, 0}, false);
    shortcut->emplace<nn::BatchNorm>("1", planes * 4);
  }
  return std::make_unique<nn::Residual>(std::move(main), std::move(shortcut));
}

std::unique_ptr<nn::Residual> basic_block(int in, int out, int stride) {
  auto main = std::make_unique<Sequential>();
  main->emplace<nn::Conv2d>("conv1", in, out, ConvGeometry{3, stride, 1}, false);
  main->emplace<nn::BatchNorm>("bn1", out);
  main->emplace<nn::Activation>("relu1", ActivationKind::ReLU);
  main->emplace<nn::Conv2d>("conv2", out, out, ConvGeometry{3, 1, 1}, false);
  main->emplace<nn::BatchNorm>("bn2", out);
  std::unique_ptr<Sequential> shortcut;
  if (stride != 1 || in != out) {
    shortcut = std::make_unique<Sequential>();
    shortcut->emplace<nn::Conv2d>("0", in, out, ConvGeometry{1, stride, 0}, false);
    shortcut->emplace<nn::BatchNorm>("1", out);
  }
  return std::make_unique<nn::Residual>(std::move(main), std::move(shortcut));
}

int feature_width(Backbone b) { return b == Backbone::Tiny ? 128 : 2048; }

void check_input(const Tensor& x, int size) {
  if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != size || x.dim(3) != size)
    throw Error(ErrorCode::ShapeMismatch, "classifier expects [N, 3, " + std::to_string(size) + ", " +
                                              std::to_string(size) + "], got " + x.shape_string());
}

Tensor batch_logits(ClassifierModel& model, const ImageSet& set, int batch_size) {
  const int k = model.config().num_classes;
  Tensor out({static_cast<int>(set.size()), k});
  for (std::size_t start = 0; start < set.size(); start += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(set.size(), start + batch_size); ++i) idx.push_back(i);
    const Tensor logits = model.forward(prepare_batch(set, idx, model.config().input_size(), std::nullopt), Mode::Eval);
    std::copy(logits.values().begin(), logits.values().end(), out.data() + start * k);
  }
  return out;
}

std::size_t count_correct(const Tensor& logits, const std::vector<int>& labels) {
  const int k = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const float* row = logits.data() + i * k;
    correct += static_cast<int>(std::max_element(row, row + k) - row) == labels[i];
  }
  return correct;
}

}  // namespace

std::string_view to_string(Backbone b) { return b == Backbone::Tiny ? "tiny" : "resnet50"; }

Backbone backbone_from_string(std::string_view s) {
  if (s == "tiny") return Backbone::Tiny;
  if (s == "resnet50") return Backbone::ResNet50;
  throw Error(ErrorCode::BadSpec, "unknown backbone " + std::string(s));
}

void ClassifierConfig::validate() const {
  if (num_classes < 2) throw Error(ErrorCode::BadSpec, "classifier needs at least 2 classes");
  if (!(lr > 0)) throw Error(ErrorCode::BadSpec, "learning rate must be positive");
  if (hidden <= 0 || batch_size <= 0 || max_epochs <= 0) throw Error(ErrorCode::BadSpec, "sizes must be positive");
  if (patience < 1 || patience > max_epochs) throw Error(ErrorCode::BadSpec, "patience must be in [1, max_epochs]");
  if (dropout < 0.0f || dropout >= 1.0f) throw Error(ErrorCode::BadSpec, "dropout must be in [0, 1)");
}

nlohmann::json to_json(const ClassifierConfig& c) {
  return {{"num_classes", c.num_classes}, {"backbone", to_string(c.backbone)}, {"freeze_base", c.freeze_base},
          {"hidden", c.hidden},           {"dropout", c.dropout},              {"lr", c.lr},
          {"batch_size", c.batch_size},   {"max_epochs", c.max_epochs},        {"patience", c.patience},
          {"augment", c.augment},         {"seed", c.seed}};
}

ClassifierConfig classifier_config_from_json(const nlohmann::json& j) {
  ClassifierConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("num_classes", c.num_classes);
  if (j.contains("backbone")) c.backbone = backbone_from_string(j.at("backbone").get<std::string>());
  get("freeze_base", c.freeze_base);
  get("hidden", c.hidden);
  get("dropout", c.dropout);
  get("lr", c.lr);
  get("batch_size", c.batch_size);
  get("max_epochs", c.max_epochs);
  get("patience", c.patience);
  get("augment", c.augment);
  get("seed", c.seed);
  return c;
}

std::unique_ptr<Sequential> build_resnet50(std::uint64_t init_seed) {
  auto net = std::make_unique<Sequential>();
  net->emplace<nn::Conv2d>("conv1", 3, 64, ConvGeometry{7, 2, 3}, false);
  net->emplace<nn::BatchNorm>("bn1", 64);
  net->emplace<nn::Activation>("relu", ActivationKind::ReLU);
  net->emplace<nn::MaxPool2d>("maxpool", ConvGeometry{3, 2, 1});
  const int blocks[4] = {3, 4, 6, 3};
  int in = 64;
  for (int l = 0; l < 4; ++l) {
    const int planes = 64 << l;
    auto layer = std::make_unique<Sequential>();
    for (int b = 0; b < blocks[l]; ++b) {
      layer->add(std::to_string(b), bottleneck(in, planes, b == 0 && l > 0 ? 2 : 1));
      in = planes * 4;
    }
    net->add("layer" + std::to_string(l + 1), std::move(layer));
  }
  init_backbone(*net, init_seed);
  return net;
}

std::unique_ptr<Sequential> build_tiny_backbone(std::uint64_t init_seed) {
  auto net = std::make_unique<Sequential>();
  net->emplace<nn::Conv2d>("conv1", 3, 16, ConvGeometry{3, 2, 1}, false);
  net->emplace<nn::BatchNorm>("bn1", 16);
  net->emplace<nn::Activation>("relu", ActivationKind::ReLU);
  int in = 16;
  for (int l = 0; l < 4; ++l) {
    const int out = 16 << l;
    auto layer = std::make_unique<Sequential>();
    layer->add("0", basic_block(in, out, l == 0 ? 1 : 2));
    net->add("layer" + std::to_string(l + 1), std::move(layer));
    in = out;
  }
  init_backbone(*net, init_seed);
  return net;
}

ClassifierModel::ClassifierModel(const ClassifierConfig& config) : config_(config) {
  config_.validate();
  const std::uint64_t seed = derive_seed(config_.seed, "classifier");
  backbone_ = config_.backbone == Backbone::Tiny ? build_tiny_backbone(derive_seed(seed, "backbone"))
                                                 : build_resnet50(derive_seed(seed, "backbone"));
  head_ = std::make_unique<Sequential>();
  head_->emplace<nn::GlobalAvgPool>("pool");
  auto& fc1 = head_->emplace<nn::Linear>("fc1", feature_width(config_.backbone), config_.hidden);
  head_->emplace<nn::Activation>("relu", ActivationKind::ReLU);
  head_->emplace<nn::Dropout>("dropout", config_.dropout);
  auto& fc2 = head_->emplace<nn::Linear>("fc2", config_.hidden, config_.num_classes);
  Rng rng(derive_seed(seed, "head"));
  init_dense(fc1, rng);
  init_dense(fc2, rng);
  nn::set_trainable(*backbone_, !config_.freeze_base);
}

Tensor ClassifierModel::forward(const Tensor& x, Mode mode) {
  check_input(x, config_.input_size());
  const Tensor features = backbone_->forward(x, config_.freeze_base ? Mode::Eval : mode);
  return head_->forward(features, mode);
}

void ClassifierModel::backward(const Tensor& grad_logits) {
  const Tensor g = head_->backward(grad_logits);
  if (!config_.freeze_base) backbone_->backward(g);
}

std::map<std::string, Tensor> ClassifierModel::export_weights() {
  auto w = nn::export_weights(*backbone_, "backbone.");
  w.merge(nn::export_weights(*head_, "head."));
  return w;
}

void ClassifierModel::import_weights(const std::map<std::string, Tensor>& weights) {
  nn::import_weights(*backbone_, weights, "backbone.");
  nn::import_weights(*head_, weights, "head.");
}

std::vector<nn::Parameter*> ClassifierModel::trainable_parameters() {
  std::vector<nn::Parameter*> out;
  for (auto* p : nn::parameters(*backbone_))
    if (p->trainable) out.push_back(p);
  for (auto* p : nn::parameters(*head_))
    if (p->trainable) out.push_back(p);
  return out;
}

std::size_t ClassifierModel::trainable_count() {
  return nn::count_parameters(*backbone_, true) + nn::count_parameters(*head_, true);
}

std::uint64_t ClassifierModel::backbone_checksum() { return nn::weights_checksum(*backbone_); }

std::unique_ptr<ClassifierModel> build_model(const ClassifierConfig& config,
                                             const std::optional<fs::path>& pretrained, bool random_init) {
  auto model = std::make_unique<ClassifierModel>(config);
  if (config.backbone == Backbone::ResNet50 && !random_init) {
    if (!pretrained) throw Error(ErrorCode::WeightsUnavailable, "no pretrained backbone weights configured");
    if (!fs::exists(*pretrained))
      throw Error(ErrorCode::WeightsUnavailable, "pretrained weights not found: " + pretrained->string());
    nn::import_weights(model->backbone(), nn::read_container(*pretrained).tensors);
  }
  return model;
}

Tensor softmax(const Tensor& logits) {
  if (logits.rank() != 2) throw Error(ErrorCode::ShapeMismatch, "softmax expects [N, K], got " + logits.shape_string());
  Tensor p(logits.shape());
  const int n = logits.dim(0), k = logits.dim(1);
  for (int i = 0; i < n; ++i) {
    const float* row = logits.data() + static_cast<std::size_t>(i) * k;
    float* out = p.data() + static_cast<std::size_t>(i) * k;
    const double m = *std::max_element(row, row + k);
    double sum = 0.0;
    std::vector<double> e(static_cast<std::size_t>(k));
    for (int j = 0; j < k; ++j) sum += e[static_cast<std::size_t>(j)] = std::exp(row[j] - m);
    for (int j = 0; j < k; ++j) out[j] = static_cast<float>(e[static_cast<std::size_t>(j)] / sum);
  }
  return p;
}

double cross_entropy(const Tensor& logits, const std::vector<int>& labels, Tensor* grad) {
  const int n = logits.dim(0), k = logits.dim(1);
  if (static_cast<int>(labels.size()) != n) throw Error(ErrorCode::ShapeMismatch, "one label per row required");
  if (grad) *grad = Tensor(logits.shape());
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const float* row = logits.data() + static_cast<std::size_t>(i) * k;
    const double m = *std::max_element(row, row + k);
    double sum = 0.0;
    for (int j = 0; j < k; ++j) sum += std::exp(row[j] - m);
    const double log_z = m + std::log(sum);
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= k) throw Error(ErrorCode::UnknownLabel, "label " + std::to_string(y) + " out of range");
    total += log_z - row[y];
    if (grad)
      for (int j = 0; j < k; ++j)
        (*grad)[static_cast<std::size_t>(i) * k + j] =
            static_cast<float>((std::exp(row[j] - log_z) - (j == y ? 1.0 : 0.0)) / n);
  }
  return total / n;
}

bool EarlyStopping::update(double val_loss) {
  ++epoch_;
  improved_ = epoch_ == 1 || val_loss < best_;
  if (improved_) {
    best_ = val_loss;
    best_epoch_ = epoch_;
    since_best_ = 0;
  } else {
    ++since_best_;
  }
  return since_best_ >= patience_;
}

nlohmann::json to_json(const TrainingHistory& h) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : h.epochs)
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"train_acc", e.train_acc},
                      {"val_loss", e.val_loss},
                      {"val_acc", e.val_acc}});
  return {{"epochs", epochs}, {"best_epoch", h.best_epoch}, {"stopped_early", h.stopped_early}};
}

TrainingHistory history_from_json(const nlohmann::json& j) {
  TrainingHistory h;
  for (const auto& e : j.at("epochs"))
    h.epochs.push_back({e.at("epoch").get<int>(), e.at("train_loss").get<double>(), e.at("train_acc").get<double>(),
                        e.at("val_loss").get<double>(), e.at("val_acc").get<double>()});
  h.best_epoch = j.at("best_epoch").get<int>();
  h.stopped_early = j.at("stopped_early").get<bool>();
  return h;
}

void write_history_csv(const fs::path& path, const TrainingHistory& h) {
  std::ostringstream s;
  s.precision(9);
  s << "epoch,train_loss,train_acc,val_loss,val_acc\n";
  for (const auto& e : h.epochs)
    s << e.epoch << ',' << e.train_loss << ',' << e.train_acc << ',' << e.val_loss << ',' << e.val_acc << '\n';
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
    out << s.str();
  }
  fs::rename(tmp, path);
}

void MemoryImageSet::add(std::string id, PixelArray img, int label) {
  ids_.push_back(std::move(id));
  images_.push_back(to_unit(img));
  labels_.push_back(label);
}

ManifestImageSet::ManifestImageSet(const data::DatasetManifest& manifest, const data::SplitManifest& split,
                                   data::Split which, std::optional<int> cache_size)
    : manifest_(&manifest) {
  for (const auto& r : manifest.records) {
    auto it = split.assignment.find(r.image_id);
    if (it != split.assignment.end() && it->second == which) records_.push_back(r);
  }
  if (cache_size)
    for (const auto& r : records_)
      cache_.push_back(to_unit(resize_image(load_image(manifest_->resolve(r)), *cache_size, *cache_size)));
}

PixelArray ManifestImageSet::image(std::size_t i) const {
  if (!cache_.empty()) return cache_.at(i);
  return to_unit(load_image(manifest_->resolve(records_.at(i))));
}

Tensor prepare_batch(const ImageSet& set, const std::vector<std::size_t>& indices, int size,
                     std::optional<std::uint64_t> augment_seed) {
  Tensor batch({static_cast<int>(indices.size()), 3, size, size});
  float* out = batch.data();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    PixelArray img = to_unit(set.image(indices[k]));
    if (img.height() != size || img.width() != size) img = resize_image(img, size, size);
    if (augment_seed) img = classifier_augment(img, derive_seed(*augment_seed, static_cast<std::uint64_t>(k)));
    const PixelArray norm = normalize_for_classifier(img);
    out = std::copy(norm.values().begin(), norm.values().end(), out);
  }
  return batch;
}

void calibrate_batch_norm(ClassifierModel& model, const ImageSet& set, int passes) {
  if (set.size() == 0) throw Error(ErrorCode::EmptySplit, "no images to calibrate on");
  const std::size_t n = std::min<std::size_t>(set.size(), 256);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < n; ++i) idx.push_back(i * set.size() / n);
  const Tensor x = prepare_batch(set, idx, model.config().input_size(), std::nullopt);
  // Momentum 0.1 per pass: 40 passes leave under 2% of the initial statistics.
  for (int p = 0; p < passes; ++p) model.backbone().forward(x, Mode::Train);
}

void save_checkpoint(const fs::path& path, const ModelCheckpoint& ckpt) {
  nn::Container c;
  c.header = {{"kind", "classifier"},
              {"schema_version", kClassifierCheckpointSchema},
              {"config", to_json(ckpt.config)},
              {"class_names", ckpt.class_names},
              {"history", to_json(ckpt.history)}};
  c.tensors = ckpt.weights;
  nn::write_container(path, c);
}

ModelCheckpoint load_checkpoint(const fs::path& path) {
  nn::Container c = nn::read_container(path);
  if (c.header.value("kind", "") != "classifier" ||
      c.header.value("schema_version", 0) != kClassifierCheckpointSchema)
    throw Error(ErrorCode::CheckpointMismatch, path.string() + " is not a classifier checkpoint of a supported version");
  ModelCheckpoint ckpt;
  ckpt.config = classifier_config_from_json(c.header.at("config"));
  ckpt.class_names = c.header.at("class_names").get<std::vector<std::string>>();
  ckpt.history = history_from_json(c.header.at("history"));
  ckpt.weights = std::move(c.tensors);
  return ckpt;
}

std::unique_ptr<ClassifierModel> restore_model(const ModelCheckpoint& ckpt) {
  auto model = std::make_unique<ClassifierModel>(ckpt.config);
  model->import_weights(ckpt.weights);
  return model;
}

TrainOutcome train_classifier(ClassifierModel& model, const ImageSet& train, const ImageSet& validation,
                              const std::vector<std::string>& class_names, const std::optional<fs::path>& out_dir,
                              ClassifierHooks hooks) {
  const ClassifierConfig& cfg = model.config();
  if (train.size() == 0) throw Error(ErrorCode::EmptySplit, "training split is empty");
  if (validation.size() == 0) throw Error(ErrorCode::EmptySplit, "validation split is empty");
  if (static_cast<int>(class_names.size()) != cfg.num_classes)
    throw Error(ErrorCode::BadSpec, "class name count differs from num_classes");
  if (out_dir) fs::create_directories(*out_dir);

  nn::Adam opt(model.trainable_parameters(), nn::AdamConfig{cfg.lr});
  EarlyStopping stopper(cfg.patience);
  TrainingHistory history;
  auto best = model.export_weights();
  std::vector<int> val_labels;
  for (std::size_t i = 0; i < validation.size(); ++i) val_labels.push_back(validation.label(i));

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg.seed, "classifier", "order", static_cast<std::uint64_t>(epoch)));
    rng.shuffle(std::span(order));

    double loss_sum = 0.0;
    std::size_t correct = 0;
    int batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size), ++batch_no) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<long>(start),
                                         order.begin() + static_cast<long>(std::min(order.size(), start + cfg.batch_size)));
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(train.label(i));
      const auto bseed = derive_seed(cfg.seed, "classifier", static_cast<std::uint64_t>(epoch),
                                     static_cast<std::uint64_t>(batch_no));
      const Tensor x = prepare_batch(train, idx, cfg.input_size(),
                                     cfg.augment ? std::optional(derive_seed(bseed, "augment")) : std::nullopt);
      model.head().reseed(derive_seed(bseed, "dropout"));
      nn::zero_grad(model.head());
      if (!cfg.freeze_base) nn::zero_grad(model.backbone());
      const Tensor logits = model.forward(x, Mode::Train);
      Tensor grad;
      loss_sum += cross_entropy(logits, labels, &grad) * static_cast<double>(idx.size());
      correct += count_correct(logits, labels);
      model.backward(grad);
      opt.step();
    }

    const Tensor val_logits = batch_logits(model, validation, cfg.batch_size);
    EpochRecord rec{epoch, loss_sum / static_cast<double>(train.size()),
                    static_cast<double>(correct) / static_cast<double>(train.size()),
                    cross_entropy(val_logits, val_labels),
                    static_cast<double>(count_correct(val_logits, val_labels)) / static_cast<double>(validation.size())};
    if (!std::isfinite(rec.train_loss) || !std::isfinite(rec.val_loss))
      throw Error(ErrorCode::Diverged, "non-finite classifier loss at epoch " + std::to_string(epoch));
    const bool stop = stopper.update(rec.val_loss);
    if (stopper.improved()) best = model.export_weights();
    history.epochs.push_back(rec);
    history.best_epoch = stopper.best_epoch();
    if (hooks.on_epoch) hooks.on_epoch(rec);
    if (out_dir) write_history_csv(*out_dir / "training_history.csv", history);
    if (stop) {
      history.stopped_early = epoch < cfg.max_epochs;
      break;
    }
  }

  model.import_weights(best);
  TrainOutcome outcome{{model.export_weights(), cfg, class_names, history}, history};
  if (out_dir) save_checkpoint(*out_dir / "clf_best.ckpt", outcome.checkpoint);
  return outcome;
}

Tensor predict_proba(ClassifierModel& model, const Tensor& batch) { return softmax(model.forward(batch, Mode::Eval)); }

Tensor predict_proba(ClassifierModel& model, const ImageSet& set, int batch_size) {
  if (set.size() == 0) return Tensor({0, model.config().num_classes});
  return softmax(batch_logits(model, set, batch_size));
}

}  // namespace skinlab::classifier
