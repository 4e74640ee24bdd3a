#include "skinlab/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include "skinlab/balance.hpp"
#include "skinlab/data.hpp"
#include "skinlab/metrics.hpp"
#include "skinlab/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace skinlab::pipeline {

namespace {

const fs::path kManifest = "manifest.json";
const fs::path kSplit = "split.json";
const fs::path kGanDir = "gan";
const fs::path kSyntheticDir = "synthetic";
const fs::path kBalancedManifest = "balanced_manifest.json";
const fs::path kBalancedSplit = "balanced_split.json";
const fs::path kClassifierDir = "classifier";
const fs::path kEvaluationDir = "evaluation";
const fs::path kExplanationDir = "explanations";
const fs::path kReportDir = "report";

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string file_checksum(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return "";
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    h = fnv1a(std::string_view(buf, static_cast<std::size_t>(in.gcount())), h);
  }
  return hex(h);
}

std::vector<Stage> parents(Stage s) {
  switch (s) {
    case Stage::Ingest: return {};
    case Stage::Split: return {Stage::Ingest};
    case Stage::TrainGan: return {Stage::Split};
    case Stage::Synthesize: return {Stage::TrainGan};
    case Stage::TrainClf: return {Stage::Synthesize};
    case Stage::Evaluate: return {Stage::TrainClf};
    case Stage::Explain: return {Stage::TrainClf};
    case Stage::Report: return {Stage::Evaluate};
  }
  return {};
}

[[noreturn]] void config_error(const std::string& detail) { throw Error(ErrorCode::ConfigError, detail); }

// Every key of `given` must exist in `reference`, recursively through objects.
void check_known_keys(const json& given, const json& reference, const std::string& prefix) {
  if (!given.is_object()) return;
  if (!reference.is_object()) config_error("'" + prefix + "' is not a section");
  for (const auto& [key, value] : given.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!reference.contains(key)) config_error("unknown config key '" + path + "'");
    if (value.is_object()) check_known_keys(value, reference.at(key), path);
  }
}

json parse_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return text;
  }
}

std::string rel(const fs::path& root, const fs::path& p) { return fs::relative(p, root).generic_string(); }

std::string fmt_prob(float v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc | std::ios::binary);
    if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
    out << text;
    if (!out) throw Error(ErrorCode::IoFailure, "short write to " + path.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::IoFailure, "cannot rename onto " + path.string() + ": " + ec.message());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> class_names(const data::DatasetManifest& m) {
  std::vector<std::string> out;
  for (const auto& c : m.class_set) out.push_back(c.name);
  return out;
}

}  // namespace

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::Ingest: return "ingest";
    case Stage::Split: return "split";
    case Stage::TrainGan: return "train-gan";
    case Stage::Synthesize: return "synthesize";
    case Stage::TrainClf: return "train-clf";
    case Stage::Evaluate: return "evaluate";
    case Stage::Explain: return "explain";
    case Stage::Report: return "report";
  }
  return "?";
}

// ---------------------------------------------------------------- config

RunConfig default_config(bool toy_mode) {
  RunConfig c;
  c.toy_mode = toy_mode;
  if (!toy_mode) return c;
  c.gan.generator.base_channels = 64;
  c.gan.discriminator.base_channels = 16;
  c.gan.batch_size = 16;
  c.gan.epochs = 5;
  c.gan.lr_g = c.gan.lr_d = 2e-4;
  c.classifier.backbone = classifier::Backbone::Tiny;
  c.classifier.lr = 3e-3;
  c.classifier.batch_size = 16;
  c.classifier.max_epochs = 20;
  c.classifier.augment = false;
  c.calibrate_bn = true;
  c.xai.segments = 20;
  c.xai.image_size = 128;
  c.xai.lime.n_samples = 300;
  c.xai.shap.n_permutations = 50;
  return c;
}

json to_json(const RunConfig& c) {
  json g = gan::to_json(c.gan);
  g.erase("seed");
  json k = classifier::to_json(c.classifier);
  k.erase("seed");
  k.erase("num_classes");
  k["random_init"] = c.random_init;
  k["calibrate_bn"] = c.calibrate_bn;
  k["eval_batch_size"] = c.eval_batch_size;
  return {{"paths",
           {{"data_csv", c.data_csv},
            {"image_root", c.image_root},
            {"run_dir", c.run_dir},
            {"pretrained_weights", c.pretrained_weights}}},
          {"seed", c.seed},
          {"toy_mode", c.toy_mode},
          {"data", {{"ratios", c.ratios}}},
          {"toy", {{"classes", c.toy.classes}, {"per_class_counts", c.toy.per_class_counts}}},
          {"gan", g},
          {"classifier", k},
          {"xai",
           {{"segments", c.xai.segments},
            {"compactness", c.xai.compactness},
            {"image_size", c.xai.image_size},
            {"explain_count", c.xai.explain_count},
            {"method", c.xai.method},
            {"batch_size", c.xai.lime.batch_size},
            {"lime",
             {{"n_samples", c.xai.lime.n_samples},
              {"top_k", c.xai.lime.top_k},
              {"kernel_width", c.xai.lime.kernel_width},
              {"ridge_lambda", c.xai.lime.ridge_lambda}}},
            {"shap",
             {{"n_permutations", c.xai.shap.n_permutations},
              {"exact_max_segments", c.xai.shap.exact_max_segments}}}}}};
}

RunConfig config_from_json(const json& j) {
  const bool toy = j.value("toy_mode", false);
  check_known_keys(j, to_json(default_config(toy)), "");
  RunConfig c = default_config(toy);
  try {
    // Start from the defaults so partial documents are accepted.
    json full = to_json(c);
    full.merge_patch(j);
    const auto& p = full.at("paths");
    p.at("data_csv").get_to(c.data_csv);
    p.at("image_root").get_to(c.image_root);
    p.at("run_dir").get_to(c.run_dir);
    p.at("pretrained_weights").get_to(c.pretrained_weights);
    full.at("seed").get_to(c.seed);
    full.at("toy_mode").get_to(c.toy_mode);
    full.at("data").at("ratios").get_to(c.ratios);
    full.at("toy").at("classes").get_to(c.toy.classes);
    full.at("toy").at("per_class_counts").get_to(c.toy.per_class_counts);
    c.gan = gan::gan_config_from_json(full.at("gan"));
    const auto& k = full.at("classifier");
    c.classifier = classifier::classifier_config_from_json(k);
    k.at("random_init").get_to(c.random_init);
    k.at("calibrate_bn").get_to(c.calibrate_bn);
    k.at("eval_batch_size").get_to(c.eval_batch_size);
    const auto& x = full.at("xai");
    x.at("segments").get_to(c.xai.segments);
    x.at("compactness").get_to(c.xai.compactness);
    x.at("image_size").get_to(c.xai.image_size);
    x.at("explain_count").get_to(c.xai.explain_count);
    x.at("method").get_to(c.xai.method);
    x.at("batch_size").get_to(c.xai.lime.batch_size);
    c.xai.shap.batch_size = c.xai.lime.batch_size;
    x.at("lime").at("n_samples").get_to(c.xai.lime.n_samples);
    x.at("lime").at("top_k").get_to(c.xai.lime.top_k);
    x.at("lime").at("kernel_width").get_to(c.xai.lime.kernel_width);
    x.at("lime").at("ridge_lambda").get_to(c.xai.lime.ridge_lambda);
    x.at("shap").at("n_permutations").get_to(c.xai.shap.n_permutations);
    x.at("shap").at("exact_max_segments").get_to(c.xai.shap.exact_max_segments);
  } catch (const json::exception& e) {
    config_error(std::string("malformed config: ") + e.what());
  } catch (const Error& e) {
    config_error(e.detail());
  }

  double sum = 0.0;
  for (double r : c.ratios) {
    if (r < 0) config_error("split ratios must be non-negative");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) config_error("split ratios must sum to 1");
  if (c.toy.classes < 2 || static_cast<int>(c.toy.per_class_counts.size()) != c.toy.classes)
    config_error("toy.per_class_counts needs one count per class (at least two classes)");
  if (c.run_dir.empty()) config_error("paths.run_dir is empty");
  if (c.eval_batch_size < 1 || c.xai.lime.batch_size < 1) config_error("batch sizes must be positive");
  if (c.xai.segments < 1 || c.xai.image_size < 8 || c.xai.explain_count < 0)
    config_error("invalid xai segment count, image size or explain count");
  if (c.xai.method != "lime" && c.xai.method != "shap" && c.xai.method != "both")
    config_error("xai.method must be lime, shap or both");
  try {
    c.gan.validate();
    auto k = c.classifier;
    k.num_classes = std::max(k.num_classes, 2);
    k.validate();
  } catch (const Error& e) {
    config_error(e.detail());
  }
  return c;
}

RunConfig resolve_config(const ConfigOverrides& o) {
  json file = json::object();
  auto load = [&](const fs::path& p) {
    try {
      file = data::read_json_file(p);
    } catch (const std::exception& e) {
      config_error("cannot read config " + p.string() + ": " + e.what());
    }
    if (!file.is_object()) config_error("config " + p.string() + " is not a JSON object");
  };
  if (o.config_file) {
    load(*o.config_file);
  } else {
    const fs::path saved = fs::path(o.run_dir.value_or(RunConfig{}.run_dir)) / "config.json";
    if (fs::exists(saved)) load(saved);
  }
  if (o.toy_mode) file["toy_mode"] = true;
  const bool toy = file.value("toy_mode", false);
  json j = to_json(default_config(toy));
  check_known_keys(file, j, "");
  j.merge_patch(file);
  if (o.seed) j["seed"] = *o.seed;
  if (o.run_dir) j["paths"]["run_dir"] = *o.run_dir;
  if (o.tiny_backbone) j["classifier"]["backbone"] = std::string(classifier::to_string(classifier::Backbone::Tiny));
  for (const auto& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) config_error("--set expects key=value, got '" + s + "'");
    const std::string key = s.substr(0, eq);
    json* node = &j;
    std::stringstream parts(key);
    std::string part;
    while (std::getline(parts, part, '.')) {
      if (!node->is_object() || !node->contains(part)) config_error("unknown config key '" + key + "'");
      node = &(*node)[part];
    }
    json value = parse_value(s.substr(eq + 1));
    if (node->is_number() && !value.is_number()) config_error("'" + key + "' expects a number");
    if (node->is_boolean() && !value.is_boolean()) config_error("'" + key + "' expects true or false");
    if (node->is_array() && !value.is_array()) config_error("'" + key + "' expects a JSON array");
    *node = std::move(value);
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------- ledger plumbing

Pipeline::Pipeline(RunConfig config) : config_(std::move(config)) {
  run_dir_ = fs::absolute(config_.run_dir).lexically_normal();
}

Pipeline::~Pipeline() {
  if (lock_fd_ >= 0) {
    ::flock(lock_fd_, LOCK_UN);
    ::close(lock_fd_);
  }
}

std::string Pipeline::stage_hash(Stage s) const {
  json block;
  switch (s) {
    case Stage::Ingest:
      if (config_.toy_mode)
        block = {{"toy", {{"classes", config_.toy.classes}, {"counts", config_.toy.per_class_counts}}}};
      else
        block = {{"data_csv", fs::absolute(config_.data_csv).lexically_normal().string()},
                 {"image_root", fs::absolute(config_.image_root).lexically_normal().string()}};
      block["seed"] = config_.seed;
      break;
    case Stage::Split: block = {{"ratios", config_.ratios}, {"seed", config_.seed}}; break;
    case Stage::TrainGan: block = {{"gan", gan::to_json(config_.gan)}, {"seed", config_.seed}}; break;
    case Stage::Synthesize: block = {{"seed", config_.seed}}; break;
    case Stage::TrainClf:
      block = to_json(config_).at("classifier");
      block["pretrained_weights"] = config_.pretrained_weights;
      block["seed"] = config_.seed;
      break;
    case Stage::Evaluate: block = {{"eval_batch_size", config_.eval_batch_size}}; break;
    case Stage::Explain:
      block = to_json(config_).at("xai");
      block.erase("explain_count");
      block["seed"] = config_.seed;
      break;
    case Stage::Report: block = json::object(); break;
  }
  json doc = {{"stage", to_string(s)}, {"config", block}};
  for (Stage p : parents(s)) doc["upstream"][std::string(to_string(p))] = stage_hash(p);
  return hex(fnv1a(doc.dump()));
}

json Pipeline::ledger() const {
  const fs::path path = run_dir_ / "ledger.json";
  json l;
  if (fs::exists(path)) l = data::read_json_file(path);
  if (!l.is_object()) l = json::object();
  l["schema_version"] = kLedgerSchemaVersion;
  for (Stage s : kStages) {
    auto& e = l["stages"][std::string(to_string(s))];
    if (!e.is_object()) e = json::object();
    if (!e.contains("status")) e["status"] = "pending";
  }
  return l;
}

void Pipeline::save_ledger(const json& ledger) const { data::write_json_file(run_dir_ / "ledger.json", ledger); }

void Pipeline::check_upstream(Stage s, const json& ledger) const {
  for (Stage p : parents(s)) {
    const auto& e = ledger.at("stages").at(std::string(to_string(p)));
    const std::string status = e.value("status", "pending");
    if (status != "done")
      throw Error(ErrorCode::StaleUpstream, std::string(to_string(s)) + " needs " + std::string(to_string(p)) +
                                                ", which is " + status);
    if (e.value("config_hash", "") != stage_hash(p))
      throw Error(ErrorCode::StaleUpstream, std::string(to_string(p)) +
                                                " ran under a different configuration; rerun it before " +
                                                std::string(to_string(s)));
  }
}

void Pipeline::acquire_lock() {
  if (lock_fd_ >= 0) return;
  std::error_code ec;
  fs::create_directories(run_dir_, ec);
  if (ec) throw Error(ErrorCode::IoFailure, "cannot create " + run_dir_.string() + ": " + ec.message());
  const fs::path lock = run_dir_ / ".lock";
  const int fd = ::open(lock.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  if (fd < 0) throw Error(ErrorCode::IoFailure, "cannot open " + lock.string());
  if (::flock(fd, LOCK_EX | LOCK_NB) != 0) {
    ::close(fd);
    throw Error(ErrorCode::IoFailure, "run directory " + run_dir_.string() + " is locked by another process");
  }
  lock_fd_ = fd;
  const std::string pid = std::to_string(::getpid()) + "\n";
  if (::ftruncate(fd, 0) == 0) [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
}

json Pipeline::checksums(const std::vector<std::string>& rel_paths) const {
  json out = json::object();
  for (const auto& p : rel_paths) out[p] = file_checksum(run_dir_ / p);
  return out;
}

bool Pipeline::artifacts_intact(const json& artifacts) const {
  if (!artifacts.is_object() || artifacts.empty()) return false;
  for (const auto& [p, sum] : artifacts.items())
    if (file_checksum(run_dir_ / p) != sum.get<std::string>()) return false;
  return true;
}

template <typename Body>
StageOutcome Pipeline::run_stage(Stage s, Body&& body) {
  const std::string name(to_string(s));
  const std::string hash = stage_hash(s);
  check_upstream(s, ledger());
  acquire_lock();
  json l = ledger();
  check_upstream(s, l);
  auto& entry = l["stages"][name];
  StageOutcome out{s};
  if (entry.value("status", "") == "done" && entry.value("config_hash", "") == hash &&
      artifacts_intact(entry["artifacts"])) {
    out.skipped = true;
    for (const auto& [p, sum] : entry["artifacts"].items()) out.artifacts.push_back(p);
    return out;
  }
  data::write_json_file(run_dir_ / "config.json", to_json(config_));
  const std::string started = data::utc_timestamp();
  try {
    body(out);
  } catch (const Error& e) {
    entry = {{"status", "failed"},
             {"config_hash", hash},
             {"started_at", started},
             {"finished_at", data::utc_timestamp()},
             {"error", error_record(e, name)}};
    save_ledger(l);
    throw;
  }
  entry = {{"status", "done"},
           {"config_hash", hash},
           {"artifacts", checksums(out.artifacts)},
           {"warnings", out.warnings},
           {"started_at", started},
           {"finished_at", data::utc_timestamp()}};
  save_ledger(l);
  return out;
}

std::vector<std::string> Pipeline::minority_classes() const {
  const auto manifest = data::manifest_from_json(data::read_json_file(run_dir_ / kManifest));
  const auto split = data::split_from_json(data::read_json_file(run_dir_ / kSplit));
  const auto plan = balance::plan_synthesis(data::compute_distribution(manifest, split, data::Split::Train));
  std::vector<std::string> out;
  for (const auto& [name, quota] : plan.quotas)
    if (quota > 0) out.push_back(name);
  return out;
}

// ---------------------------------------------------------------- stages

StageOutcome Pipeline::ingest() {
  return run_stage(Stage::Ingest, [&](StageOutcome& out) {
    fs::path csv, root;
    if (config_.toy_mode) {
      root = run_dir_ / "toy_data";
      fs::remove_all(root);
      data::generate_toy_dataset(root, config_.toy.classes, config_.toy.per_class_counts,
                                 derive_seed(config_.seed, "toy"));
      csv = root / "metadata.csv";
      root /= "images";
      out.artifacts.push_back(rel(run_dir_, csv));
    } else {
      if (config_.data_csv.empty() || config_.image_root.empty())
        throw Error(ErrorCode::ConfigError, "paths.data_csv and paths.image_root are required outside toy mode");
      csv = config_.data_csv;
      root = config_.image_root;
    }
    const auto result = data::ingest_metadata(csv, root, config_.seed);
    json skipped = json::array();
    for (const auto& s : result.skipped)
      skipped.push_back({{"line", s.line}, {"image_id", s.image_id}, {"reason", s.reason}});
    for (const auto& s : result.skipped) out.warnings.push_back("skipped line " + std::to_string(s.line) + ": " + s.reason);
    data::write_json_file(run_dir_ / kManifest, data::to_json(result.manifest));
    data::write_json_file(run_dir_ / "class_distribution.json",
                          data::to_json(data::compute_distribution(result.manifest)));
    data::write_json_file(run_dir_ / "skipped_rows.json", skipped);
    for (const char* f : {"manifest.json", "class_distribution.json", "skipped_rows.json"}) out.artifacts.push_back(f);
  });
}

StageOutcome Pipeline::split() {
  return run_stage(Stage::Split, [&](StageOutcome& out) {
    const auto manifest = data::manifest_from_json(data::read_json_file(run_dir_ / kManifest));
    const auto split = data::stratified_split(manifest, config_.ratios, config_.seed);
    data::write_json_file(run_dir_ / kSplit, data::to_json(split));
    json dist;
    for (auto which : {data::Split::Train, data::Split::Validation, data::Split::Test})
      dist[std::string(data::to_string(which))] = data::to_json(data::compute_distribution(manifest, split, which));
    data::write_json_file(run_dir_ / "split_distribution.json", dist);
    out.artifacts = {"split.json", "split_distribution.json"};
  });
}

StageOutcome Pipeline::train_gan(const std::optional<std::string>& class_name) {
  const std::string name(to_string(Stage::TrainGan));
  const std::string hash = stage_hash(Stage::TrainGan);
  check_upstream(Stage::TrainGan, ledger());
  acquire_lock();
  json l = ledger();
  check_upstream(Stage::TrainGan, l);

  const auto manifest = data::manifest_from_json(data::read_json_file(run_dir_ / kManifest));
  const auto split = data::split_from_json(data::read_json_file(run_dir_ / kSplit));
  const auto minority = minority_classes();
  std::vector<std::string> targets = minority;
  if (class_name) {
    if (!manifest.find_class(*class_name)) throw Error(ErrorCode::UnknownLabel, "unknown class " + *class_name);
    targets = {*class_name};
  }

  auto& entry = l["stages"][name];
  if (entry.value("config_hash", "") != hash) entry = {{"status", "pending"}, {"classes", json::object()}};
  if (!entry.contains("classes")) entry["classes"] = json::object();
  StageOutcome out{Stage::TrainGan};
  out.skipped = true;
  const fs::path dir = run_dir_ / kGanDir;
  for (const auto& cls : targets) {
    auto& ce = entry["classes"][cls];
    if (ce.is_object() && ce.value("status", "") == "done" && artifacts_intact(ce["artifacts"])) {
      for (const auto& [p, sum] : ce["artifacts"].items()) out.artifacts.push_back(p);
      continue;
    }
    if (out.skipped) data::write_json_file(run_dir_ / "config.json", to_json(config_));
    out.skipped = false;
    const std::string started = data::utc_timestamp();
    try {
      std::error_code ec;
      if (fs::exists(dir))
        for (const auto& f : fs::directory_iterator(dir))
          if (f.path().filename().string().rfind("gan_" + cls + "_", 0) == 0) fs::remove(f.path(), ec);
      auto cfg = config_.gan;
      cfg.seed = derive_seed(config_.seed, "gan", cls);
      auto images = gan::load_class_images(manifest, split, cls, cfg.generator.out_size);
      const auto result = gan::train_dcgan(cls, std::move(images.images), cfg, dir);
      std::vector<std::string> files;
      for (const auto& p : result.written) files.push_back(rel(run_dir_, p));
      files.push_back(rel(run_dir_, dir / ("gan_" + cls + "_losses.csv")));
      std::sort(files.begin(), files.end());
      files.erase(std::unique(files.begin(), files.end()), files.end());
      ce = {{"status", "done"},
            {"artifacts", checksums(files)},
            {"final_checkpoint", rel(run_dir_, dir / gan::checkpoint_filename(cls, result.checkpoint.epoch))},
            {"started_at", started},
            {"finished_at", data::utc_timestamp()}};
      out.artifacts.insert(out.artifacts.end(), files.begin(), files.end());
    } catch (const Error& e) {
      ce = {{"status", "failed"}, {"error", error_record(e, name + ":" + cls)}};
      entry["status"] = "failed";
      entry["config_hash"] = hash;
      save_ledger(l);
      throw;
    }
    entry["config_hash"] = hash;
    save_ledger(l);
  }

  bool all_done = true;
  json artifacts = json::object();
  for (const auto& cls : minority) {
    const auto& ce = entry["classes"].value(cls, json::object());
    if (ce.value("status", "") != "done") {
      all_done = false;
      continue;
    }
    for (const auto& [p, sum] : ce.at("artifacts").items()) artifacts[p] = sum;
  }
  if (!all_done) out.warnings.push_back("some minority classes still lack a trained GAN");
  json updated = entry;
  updated["status"] = all_done ? "done" : "pending";
  updated["config_hash"] = hash;
  updated["artifacts"] = artifacts;
  updated["minority_classes"] = minority;
  if (!out.skipped || !updated.contains("finished_at")) updated["finished_at"] = data::utc_timestamp();
  if (updated != entry) {
    entry = std::move(updated);
    save_ledger(l);
  }
  return out;
}

StageOutcome Pipeline::synthesize() {
  return run_stage(Stage::Synthesize, [&](StageOutcome& out) {
    const auto manifest = data::manifest_from_json(data::read_json_file(run_dir_ / kManifest));
    const auto split = data::split_from_json(data::read_json_file(run_dir_ / kSplit));
    const auto plan = balance::plan_synthesis(data::compute_distribution(manifest, split, data::Split::Train));
    data::write_json_file(run_dir_ / "synthesis_plan.json", balance::to_json(plan));

    const json gan_entry = ledger()["stages"]["train-gan"]["classes"];
    std::vector<std::unique_ptr<balance::GanSynthesizer>> owned;
    std::map<std::string, balance::Synthesizer*> synths;
    for (const auto& [cls, quota] : plan.quotas) {
      if (quota <= 0) continue;
      const auto ce = gan_entry.value(cls, json::object());
      if (!ce.contains("final_checkpoint"))
        throw Error(ErrorCode::MissingCheckpoint, cls);
      owned.push_back(std::make_unique<balance::GanSynthesizer>(
          gan::load_checkpoint(run_dir_ / ce.at("final_checkpoint").get<std::string>())));
      synths[cls] = owned.back().get();
    }
    fs::remove_all(run_dir_ / kSyntheticDir);
    const auto balanced = balance::apply_plan(manifest, split, plan, synths, run_dir_ / kSyntheticDir,
                                              derive_seed(config_.seed, "synthesize"));
    data::write_json_file(run_dir_ / kBalancedManifest, data::to_json(balanced.manifest));
    data::write_json_file(run_dir_ / kBalancedSplit, data::to_json(balanced.split));
    data::write_json_file(run_dir_ / "balanced_distribution.json",
                          data::to_json(data::compute_distribution(balanced.manifest, balanced.split,
                                                                   data::Split::Train)));
    out.artifacts = {"synthesis_plan.json", "balanced_manifest.json", "balanced_split.json",
                     "balanced_distribution.json"};
    for (const auto& r : balanced.manifest.records)
      if (r.source == data::Source::Synthetic) out.artifacts.push_back(rel(run_dir_, balanced.manifest.resolve(r)));
  });
}

StageOutcome Pipeline::train_clf() {
  return run_stage(Stage::TrainClf, [&](StageOutcome& out) {
    const auto manifest = data::manifest_from_json(data::read_json_file(run_dir_ / kBalancedManifest));
    const auto split = data::split_from_json(data::read_json_file(run_dir_ / kBalancedSplit));
    auto cfg = config_.classifier;
    cfg.num_classes = static_cast<int>(manifest.class_set.size());
    cfg.seed = derive_seed(config_.seed, "classifier");
    std::optional<fs::path> weights;
    if (!config_.pretrained_weights.empty()) weights = config_.pretrained_weights;
    auto model = classifier::build_model(cfg, weights, config_.random_init);
    const classifier::ManifestImageSet train(manifest, split, data::Split::Train, cfg.input_size());
    const classifier::ManifestImageSet val(manifest, split, data::Split::Validation, cfg.input_size());
    if (config_.calibrate_bn) classifier::calibrate_batch_norm(*model, train);
    const fs::path dir = run_dir_ / kClassifierDir;
    fs::remove_all(dir);
    const auto result = classifier::train_classifier(*model, train, val, class_names(manifest), dir);
    if (result.history.stopped_early)
      out.warnings.push_back("early stopping fired; best epoch " + std::to_string(result.history.best_epoch));
    out.artifacts = {rel(run_dir_, dir / "clf_best.ckpt"), rel(run_dir_, dir / "training_history.csv")};
  });
}

StageOutcome Pipeline::evaluate() {
  return run_stage(Stage::Evaluate, [&](StageOutcome& out) {
    const auto manifest = data::manifest_from_json(data::read_json_file(run_dir_ / kBalancedManifest));
    const auto split = data::split_from_json(data::read_json_file(run_dir_ / kBalancedSplit));
    const auto ckpt = classifier::load_checkpoint(run_dir_ / kClassifierDir / "clf_best.ckpt");
    auto model = classifier::restore_model(ckpt);
    const classifier::ManifestImageSet test(manifest, split, data::Split::Test, ckpt.config.input_size());
    if (test.size() == 0) throw Error(ErrorCode::EmptySplit, "the test split is empty");
    const auto probs = classifier::predict_proba(*model, test, config_.eval_batch_size);
    std::vector<int> labels;
    for (std::size_t i = 0; i < test.size(); ++i) labels.push_back(test.label(i));
    const auto report = metrics::build_report(probs, labels, ckpt.class_names, ckpt.history);

    const auto k = ckpt.class_names.size();
    std::ostringstream csv;
    csv << "image_id,true_label,predicted_label";
    for (const auto& c : ckpt.class_names) csv << ',' << data::csv_escape("p_" + c);
    csv << '\n';
    for (std::size_t i = 0; i < test.size(); ++i) {
      const float* row = probs.data() + i * k;
      const auto pred = static_cast<std::size_t>(std::max_element(row, row + k) - row);
      csv << data::csv_escape(test.id(i)) << ',' << data::csv_escape(ckpt.class_names[static_cast<std::size_t>(labels[i])])
          << ',' << data::csv_escape(ckpt.class_names[pred]);
      for (std::size_t c = 0; c < k; ++c) csv << ',' << fmt_prob(row[c]);
      csv << '\n';
    }
    const fs::path dir = run_dir_ / kEvaluationDir;
    fs::create_directories(dir);
    write_text(dir / "predictions.csv", csv.str());
    data::write_json_file(dir / "metrics.json", metrics::to_json(report));
    out.warnings = report.degenerate_flags;
    out.artifacts = {rel(run_dir_, dir / "predictions.csv"), rel(run_dir_, dir / "metrics.json")};
  });
}

StageOutcome Pipeline::explain(const std::vector<std::string>& image_ids, const std::string& method_arg) {
  const std::string name(to_string(Stage::Explain));
  const std::string hash = stage_hash(Stage::Explain);
  const std::string method = method_arg.empty() ? config_.xai.method : method_arg;
  if (method != "lime" && method != "shap" && method != "both")
    throw Error(ErrorCode::ConfigError, "method must be lime, shap or both");
  check_upstream(Stage::Explain, ledger());
  acquire_lock();
  json l = ledger();
  check_upstream(Stage::Explain, l);

  const auto manifest = data::manifest_from_json(data::read_json_file(run_dir_ / kBalancedManifest));
  const auto split = data::split_from_json(data::read_json_file(run_dir_ / kBalancedSplit));
  std::vector<std::string> ids = image_ids;
  std::map<std::string, const data::ImageRecord*> by_id;
  for (const auto& r : manifest.records) by_id[r.image_id] = &r;
  if (ids.empty()) {
    // Round-robin over classes so the default picks are not all one label.
    std::map<int, std::vector<std::string>> per_class;
    for (const auto& id : split.ids_in(data::Split::Test)) per_class[by_id.at(id)->label.index].push_back(id);
    for (std::size_t round = 0; static_cast<int>(ids.size()) < config_.xai.explain_count; ++round) {
      bool any = false;
      for (const auto& [c, list] : per_class)
        if (round < list.size() && static_cast<int>(ids.size()) < config_.xai.explain_count) {
          ids.push_back(list[round]);
          any = true;
        }
      if (!any) break;
    }
  }
  for (const auto& id : ids)
    if (!by_id.count(id)) throw Error(ErrorCode::UnknownLabel, "unknown image id " + id);

  std::vector<std::string> methods;
  if (method != "shap") methods.push_back("lime");
  if (method != "lime") methods.push_back("shap");

  auto& entry = l["stages"][name];
  json artifacts = entry.value("config_hash", "") == hash ? entry.value("artifacts", json::object()) : json::object();
  StageOutcome out{Stage::Explain};
  std::vector<std::string> wanted;
  for (const auto& id : ids)
    for (const auto& m : methods)
      for (const char* ext : {".png", ".json"})
        wanted.push_back(rel(run_dir_, run_dir_ / kExplanationDir / (id + "_" + m + ext)));
  const bool have_all = std::all_of(wanted.begin(), wanted.end(), [&](const std::string& p) {
    return artifacts.contains(p) && file_checksum(run_dir_ / p) == artifacts[p].get<std::string>();
  });
  if (entry.value("status", "") == "done" && have_all) {
    out.skipped = true;
    out.artifacts = wanted;
    return out;
  }

  data::write_json_file(run_dir_ / "config.json", to_json(config_));
  const std::string started = data::utc_timestamp();
  try {
    const auto ckpt = classifier::load_checkpoint(run_dir_ / kClassifierDir / "clf_best.ckpt");
    auto model = classifier::restore_model(ckpt);
    const int input = ckpt.config.input_size();
    xai::BatchPredictor predict = [&](const std::vector<PixelArray>& batch) {
      classifier::MemoryImageSet set;
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        set.add(std::to_string(i), batch[i], 0);
        idx.push_back(i);
      }
      return classifier::predict_proba(*model, classifier::prepare_batch(set, idx, input, std::nullopt));
    };
    const fs::path dir = run_dir_ / kExplanationDir;
    fs::create_directories(dir);
    for (const auto& id : ids) {
      const auto img = resize_image(to_unit(load_image(manifest.resolve(*by_id.at(id)))), config_.xai.image_size,
                                    config_.xai.image_size);
      const auto seg = xai::segment_superpixels(img, {config_.xai.segments, config_.xai.compactness});
      const int cls = xai::predicted_class(predict, img);
      const std::string cls_name = ckpt.class_names.at(static_cast<std::size_t>(cls));
      if (method != "shap") {
        auto cfg = config_.xai.lime;
        cfg.seed = derive_seed(config_.seed, "lime", id);
        const auto e = xai::lime_explain(predict, img, seg, cls, cfg);
        for (const auto& w : xai::render_lime_overlay(img, e, seg, dir / (id + "_lime.png")))
          out.warnings.push_back(id + ": " + w);
        data::write_json_file(dir / (id + "_lime.json"), xai::to_json(e, id, cls_name, cfg.seed));
      }
      if (method != "lime") {
        auto cfg = config_.xai.shap;
        cfg.seed = derive_seed(config_.seed, "shap", id);
        const auto e = xai::shap_explain(predict, img, seg, cls, cfg);
        for (const auto& w : xai::render_shap_heatmap(img, e, seg, dir / (id + "_shap.png")))
          out.warnings.push_back(id + ": " + w);
        data::write_json_file(dir / (id + "_shap.json"), xai::to_json(e, id, cls_name, cfg.seed));
      }
    }
  } catch (const Error& e) {
    entry = {{"status", "failed"},
             {"config_hash", hash},
             {"artifacts", artifacts},
             {"started_at", started},
             {"finished_at", data::utc_timestamp()},
             {"error", error_record(e, name)}};
    save_ledger(l);
    throw;
  }
  const json fresh = checksums(wanted);
  for (const auto& [p, sum] : fresh.items()) artifacts[p] = sum;
  entry = {{"status", "done"},
           {"config_hash", hash},
           {"artifacts", artifacts},
           {"warnings", out.warnings},
           {"started_at", started},
           {"finished_at", data::utc_timestamp()}};
  save_ledger(l);
  out.artifacts = wanted;
  return out;
}

StageOutcome Pipeline::report() {
  return run_stage(Stage::Report, [&](StageOutcome& out) {
    const auto ckpt = classifier::load_checkpoint(run_dir_ / kClassifierDir / "clf_best.ckpt");
    const auto rows = data::parse_csv(read_text(run_dir_ / kEvaluationDir / "predictions.csv"));
    const auto k = ckpt.class_names.size();
    if (rows.size() < 2 || rows.front().size() != 3 + k)
      throw Error(ErrorCode::IoFailure, "predictions.csv does not match the classifier's classes");
    std::map<std::string, int> index;
    for (std::size_t c = 0; c < k; ++c) index[ckpt.class_names[c]] = static_cast<int>(c);
    nn::Tensor probs({static_cast<int>(rows.size() - 1), static_cast<int>(k)});
    std::vector<int> labels;
    for (std::size_t r = 1; r < rows.size(); ++r) {
      const auto& row = rows[r];
      if (row.size() != 3 + k || !index.count(row[1])) throw Error(ErrorCode::IoFailure, "malformed predictions row");
      labels.push_back(index.at(row[1]));
      for (std::size_t c = 0; c < k; ++c) probs[(r - 1) * k + c] = std::stof(row[3 + c]);
    }
    const auto report = metrics::build_report(probs, labels, ckpt.class_names, ckpt.history);
    for (const auto& p : metrics::render_report(report, run_dir_ / kReportDir)) out.artifacts.push_back(rel(run_dir_, p));
    out.warnings = report.degenerate_flags;
  });
}

std::vector<StageOutcome> Pipeline::run_all() {
  std::vector<StageOutcome> out;
  out.push_back(ingest());
  out.push_back(split());
  out.push_back(train_gan());
  out.push_back(synthesize());
  out.push_back(train_clf());
  out.push_back(evaluate());
  out.push_back(explain());
  out.push_back(report());
  return out;
}

int exit_code(const Error& e) {
  switch (e.code()) {
    case ErrorCode::ConfigError: return 2;
    case ErrorCode::StaleUpstream: return 4;
    default: return 3;
  }
}

json error_record(const Error& e, std::string_view stage) {
  return {{"code", std::string(to_string(e.code()))}, {"stage", stage}, {"detail", e.detail()}, {"exit_code", exit_code(e)}};
}

}  // namespace skinlab::pipeline
