#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "skinlab/classifier.hpp"
#include "skinlab/error.hpp"
#include "skinlab/gan.hpp"
#include "skinlab/xai.hpp"

namespace skinlab::pipeline {

inline constexpr int kLedgerSchemaVersion = 1;

struct ToyConfig {
  int classes = 7;
  std::vector<long> per_class_counts{80, 40, 30, 24, 20, 16, 12};
};

struct XaiSettings {
  int segments = 50;
  double compactness = 10.0;
  int image_size = 224;
  int explain_count = 2;  // test images explained by run-all
  std::string method = "both";
  xai::LimeConfig lime;
  xai::ShapConfig shap;
};

struct RunConfig {
  std::string data_csv;
  std::string image_root;
  std::string run_dir = "run";
  std::string pretrained_weights;
  std::uint64_t seed = 0;
  bool toy_mode = false;
  std::array<double, 3> ratios{0.70, 0.15, 0.15};
  ToyConfig toy;
  gan::GanTrainConfig gan;
  classifier::ClassifierConfig classifier;
  bool random_init = false;   // allow a ResNet-50 without pretrained weights
  bool calibrate_bn = false;  // re-estimate backbone BN statistics before training
  int eval_batch_size = 32;
  XaiSettings xai;
};

// Defaults, or the desk-scale preset used with toy_mode.
RunConfig default_config(bool toy_mode);
nlohmann::json to_json(const RunConfig& c);
// Strict: unknown keys or wrong types raise ConfigError.
RunConfig config_from_json(const nlohmann::json& j);

struct ConfigOverrides {
  std::optional<std::filesystem::path> config_file;
  std::vector<std::string> sets;  // dotted.key=value
  std::optional<std::uint64_t> seed;
  std::optional<std::string> run_dir;
  bool toy_mode = false;
  bool tiny_backbone = false;
};

// defaults (or the toy preset) <- config file <- flags <- --set.
// Without a config file, a config.json left in the run directory is used.
RunConfig resolve_config(const ConfigOverrides& o);

enum class Stage { Ingest, Split, TrainGan, Synthesize, TrainClf, Evaluate, Explain, Report };
inline constexpr std::array<Stage, 8> kStages{Stage::Ingest,   Stage::Split,    Stage::TrainGan, Stage::Synthesize,
                                              Stage::TrainClf, Stage::Evaluate, Stage::Explain,  Stage::Report};
std::string_view to_string(Stage s);

struct StageOutcome {
  Stage stage;
  bool skipped = false;  // already done with the same config and intact artifacts
  std::vector<std::string> artifacts;
  std::vector<std::string> warnings;
};

// Stage graph over one run directory. Each stage checks that its upstream
// stages are done under the current config hash (StaleUpstream otherwise,
// before anything is written), holds the run-directory lock while it works
// and records status, artifact checksums and timestamps in ledger.json.
class Pipeline {
 public:
  explicit Pipeline(RunConfig config);
  ~Pipeline();
  Pipeline(const Pipeline&) = delete;
  Pipeline& operator=(const Pipeline&) = delete;

  StageOutcome ingest();
  StageOutcome split();
  // One class, or every class with a positive synthesis quota.
  StageOutcome train_gan(const std::optional<std::string>& class_name = std::nullopt);
  StageOutcome synthesize();
  StageOutcome train_clf();
  StageOutcome evaluate();
  // Empty ids explain the first xai.explain_count test images.
  StageOutcome explain(const std::vector<std::string>& image_ids = {}, const std::string& method = "");
  StageOutcome report();
  std::vector<StageOutcome> run_all();

  const RunConfig& config() const { return config_; }
  const std::filesystem::path& run_dir() const { return run_dir_; }
  std::string stage_hash(Stage s) const;
  nlohmann::json ledger() const;

 private:
  template <typename Body>
  StageOutcome run_stage(Stage s, Body&& body);
  void check_upstream(Stage s, const nlohmann::json& ledger) const;
  void acquire_lock();
  void save_ledger(const nlohmann::json& ledger) const;
  bool artifacts_intact(const nlohmann::json& artifacts) const;
  nlohmann::json checksums(const std::vector<std::string>& rel_paths) const;
  std::vector<std::string> minority_classes() const;

  RunConfig config_;
  std::filesystem::path run_dir_;
  int lock_fd_ = -1;
};

// 0 success, 2 config error, 3 stage failure, 4 stale upstream.
int exit_code(const Error& e);
nlohmann::json error_record(const Error& e, std::string_view stage);

}  // namespace skinlab::pipeline
