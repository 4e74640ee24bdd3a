#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "skinlab/pipeline.hpp"

using nlohmann::json;
using namespace skinlab;

namespace {

json summary(const pipeline::StageOutcome& o) {
  return {{"stage", pipeline::to_string(o.stage)},
          {"status", o.skipped ? "unchanged" : "done"},
          {"artifacts", o.artifacts.size()},
          {"warnings", o.warnings}};
}

int fail(const Error& e, std::string_view stage) {
  std::cerr << pipeline::error_record(e, stage).dump() << std::endl;
  return pipeline::exit_code(e);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GAN-balanced dermatoscopic image classification with LIME and SHAP explanations"};
  app.require_subcommand(1);
  app.fallthrough();

  pipeline::ConfigOverrides ov;
  std::string config_file, run_dir;
  std::uint64_t seed = 0;
  app.add_option("--config", config_file, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--set", ov.sets, "Override one config key, e.g. --set gan.lr_g=2e-4")->allow_extra_args(false);
  auto* seed_opt = app.add_option("--seed", seed, "Root seed for every stage");
  auto* dir_opt = app.add_option("--run-dir", run_dir, "Run directory");
  app.add_flag("--toy-mode", ov.toy_mode, "Synthetic toy dataset and the desk-scale preset");
  app.add_flag("--tiny-backbone", ov.tiny_backbone, "Small randomly initialized backbone, 64x64 inputs");

  auto* ingest = app.add_subcommand("ingest", "Read metadata and images into a manifest");
  auto* split = app.add_subcommand("split", "Stratified train/validation/test split");
  auto* train_gan = app.add_subcommand("train-gan", "Train one DCGAN per minority class");
  std::string gan_class;
  auto* class_opt = train_gan->add_option("--class", gan_class, "Train a single class");
  train_gan->add_flag("--all-minority", "Every class with a synthesis quota (default)")->excludes(class_opt);
  auto* synthesize = app.add_subcommand("synthesize", "Generate images until the training split is balanced");
  auto* train_clf = app.add_subcommand("train-clf", "Transfer-learn the classifier on the balanced data");
  auto* evaluate = app.add_subcommand("evaluate", "Predict the test split and compute metrics");
  auto* explain = app.add_subcommand("explain", "LIME and SHAP explanations for test images");
  std::vector<std::string> image_ids;
  std::string method;
  explain->add_option("--image", image_ids, "Image id; repeatable. Default: the first test images");
  explain->add_option("--method", method, "lime, shap or both")->check(CLI::IsMember({"lime", "shap", "both"}));
  auto* report = app.add_subcommand("report", "Tables and figures from the evaluation");
  auto* run_all = app.add_subcommand("run-all", "Every stage in order");
  auto* status = app.add_subcommand("status", "Print the run ledger");
  auto* print_config = app.add_subcommand("print-config", "Print the resolved configuration");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if (!config_file.empty()) ov.config_file = config_file;
  if (*seed_opt) ov.seed = seed;
  if (*dir_opt) ov.run_dir = run_dir;

  std::optional<pipeline::Pipeline> pipe;
  try {
    pipe.emplace(pipeline::resolve_config(ov));
  } catch (const Error& e) {
    return fail(e, "config");
  }

  if (*print_config) {
    std::cout << pipeline::to_json(pipe->config()).dump(2) << std::endl;
    return 0;
  }
  if (*status) {
    std::cout << pipe->ledger().dump(2) << std::endl;
    return 0;
  }

  std::string stage = app.get_subcommands().front()->get_name();
  try {
    std::vector<pipeline::StageOutcome> done;
    auto step = [&](pipeline::Stage s, auto&& fn) {
      stage = pipeline::to_string(s);
      done.push_back(fn());
      std::cout << summary(done.back()).dump() << std::endl;
    };
    if (*ingest) step(pipeline::Stage::Ingest, [&] { return pipe->ingest(); });
    if (*split) step(pipeline::Stage::Split, [&] { return pipe->split(); });
    if (*train_gan)
      step(pipeline::Stage::TrainGan, [&] {
        return pipe->train_gan(gan_class.empty() ? std::nullopt : std::optional<std::string>(gan_class));
      });
    if (*synthesize) step(pipeline::Stage::Synthesize, [&] { return pipe->synthesize(); });
    if (*train_clf) step(pipeline::Stage::TrainClf, [&] { return pipe->train_clf(); });
    if (*evaluate) step(pipeline::Stage::Evaluate, [&] { return pipe->evaluate(); });
    if (*explain) step(pipeline::Stage::Explain, [&] { return pipe->explain(image_ids, method); });
    if (*report) step(pipeline::Stage::Report, [&] { return pipe->report(); });
    if (*run_all) {
      step(pipeline::Stage::Ingest, [&] { return pipe->ingest(); });
      step(pipeline::Stage::Split, [&] { return pipe->split(); });
      step(pipeline::Stage::TrainGan, [&] { return pipe->train_gan(); });
      step(pipeline::Stage::Synthesize, [&] { return pipe->synthesize(); });
      step(pipeline::Stage::TrainClf, [&] { return pipe->train_clf(); });
      step(pipeline::Stage::Evaluate, [&] { return pipe->evaluate(); });
      step(pipeline::Stage::Explain, [&] { return pipe->explain(); });
      step(pipeline::Stage::Report, [&] { return pipe->report(); });
    }
  } catch (const Error& e) {
    return fail(e, stage);
  } catch (const std::exception& e) {
    return fail(Error(ErrorCode::IoFailure, e.what()), stage);
  }
  return 0;
}
