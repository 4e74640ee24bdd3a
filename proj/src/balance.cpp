#include "skinlab/balance.hpp"

#include <unistd.h>

#include <algorithm>
#include <limits>

#include "skinlab/error.hpp"
#include "skinlab/rng.hpp"

namespace fs = std::filesystem;

namespace skinlab::balance {

namespace {

constexpr long kGenerateChunk = 16;

std::string synthetic_name(const std::string& source_id, long n) { return source_id + "_" + std::to_string(n); }

}  // namespace

long SynthesisPlan::total() const {
  long t = 0;
  for (const auto& [c, q] : quotas) t += q;
  return t;
}

SynthesisPlan plan_synthesis(const data::ClassDistribution& dist) {
  SynthesisPlan plan;
  plan.basis = dist;
  plan.majority_count = dist.counts.empty() ? 0 : dist.majority_count();
  for (const auto& [name, n] : dist.counts) plan.quotas[name] = plan.majority_count - n;
  return plan;
}

nlohmann::json to_json(const SynthesisPlan& plan) {
  return {{"schema_version", 1},
          {"majority_count", plan.majority_count},
          {"quotas", plan.quotas},
          {"basis", data::to_json(plan.basis)}};
}

SynthesisPlan plan_from_json(const nlohmann::json& j) {
  SynthesisPlan plan;
  plan.majority_count = j.at("majority_count").get<long>();
  plan.quotas = j.at("quotas").get<std::map<std::string, long>>();
  const auto& b = j.at("basis");
  plan.basis.counts = b.at("counts").get<std::map<std::string, long>>();
  plan.basis.majority_class.name = b.at("majority_class").get<std::string>();
  plan.basis.imbalance_ratio = b.at("imbalance_ratio").is_number() ? b.at("imbalance_ratio").get<double>()
                                                                     : std::numeric_limits<double>::infinity();
  int index = 0;
  for (const auto& [name, n] : plan.basis.counts) {
    if (name == plan.basis.majority_class.name) plan.basis.majority_class.index = index;
    ++index;
  }
  return plan;
}

GanSynthesizer::GanSynthesizer(gan::GanCheckpoint ckpt) : ckpt_(std::move(ckpt)) {
  generator_ = gan::restore_generator(ckpt_);
}

std::vector<PixelArray> GanSynthesizer::sample(std::uint64_t seed, long first, long count) {
  std::vector<PixelArray> out;
  const int nz = ckpt_.config.generator.nz;
  const int size = ckpt_.config.generator.out_size;
  // One forward per image: GEMM blocking depends on the batch width, so
  // batching would make image n depend on how the request was chunked.
  for (long n = first; n < first + count; ++n) {
    const auto z = gan::sample_latent(1, nz, derive_seed(seed, ckpt_.class_name, static_cast<std::uint64_t>(n)));
    const nn::Tensor y = gan::generate(*generator_, z);
    PixelArray img(size, size, RangeTag::Signed, std::vector<float>(y.values().begin(), y.values().end()));
    img.clamp_to_range();
    out.push_back(std::move(img));
  }
  return out;
}

std::vector<data::ImageRecord> synthesize_class(Synthesizer& synth, const data::ClassLabel& label, long quota,
                                                std::uint64_t seed, const fs::path& out_dir) {
  if (quota < 0) throw Error(ErrorCode::BadSpec, "negative quota for " + label.name);
  if (synth.class_name() != label.name || out_dir.filename() != label.name)
    throw Error(ErrorCode::CheckpointMismatch, "generator for " + synth.class_name() + " cannot fill " +
                                                   out_dir.string() + " (class " + label.name + ")");
  std::vector<data::ImageRecord> records;
  if (quota == 0) return records;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw Error(ErrorCode::IoFailure, "cannot create " + out_dir.string() + ": " + ec.message());
  const std::string source = synth.source_id();
  for (long start = 0; start < quota; start += kGenerateChunk) {
    const long n = std::min(kGenerateChunk, quota - start);
    const auto imgs = synth.sample(seed, start, n);
    if (static_cast<long>(imgs.size()) != n)
      throw Error(ErrorCode::ModelCallFailure, "synthesizer for " + label.name + " returned the wrong count");
    for (long i = 0; i < n; ++i) {
      const std::string name = synthetic_name(source, start + i);
      const PixelArray unit = to_unit(denormalize_from_gan(imgs[static_cast<std::size_t>(i)]));
      save_image(resize_image(unit, kSyntheticSize, kSyntheticSize), out_dir / (name + ".png"));
      data::ImageRecord r;
      r.image_id = "synthetic_" + name;
      r.relative_path = (fs::path(label.name) / (name + ".png")).generic_string();
      r.label = label;
      r.source = data::Source::Synthetic;
      r.width_px = kSyntheticSize;
      r.height_px = kSyntheticSize;
      r.provenance["checkpoint"] = source;
      records.push_back(std::move(r));
    }
  }
  return records;
}

std::vector<data::ImageRecord> synthesize_class(const gan::GanCheckpoint& ckpt, const data::ClassLabel& label,
                                                long quota, std::uint64_t seed, const fs::path& out_dir) {
  GanSynthesizer synth(ckpt);
  return synthesize_class(synth, label, quota, seed, out_dir);
}

BalancedDataset apply_plan(const data::DatasetManifest& manifest, const data::SplitManifest& split,
                           const SynthesisPlan& plan, const std::map<std::string, Synthesizer*>& synthesizers,
                           const fs::path& synthetic_root, std::uint64_t seed) {
  const auto current = data::compute_distribution(manifest, split, data::Split::Train);
  for (const auto& [name, n] : current.counts) {
    auto q = plan.quotas.find(name);
    if (q == plan.quotas.end() || n + q->second != plan.majority_count)
      throw Error(ErrorCode::BadSpec, "plan does not balance the training split for class " + name);
  }
  for (const auto& [name, quota] : plan.quotas) {
    if (!manifest.find_class(name)) throw Error(ErrorCode::UnknownLabel, "plan names unknown class " + name);
    if (quota > 0 && (!synthesizers.contains(name) || synthesizers.at(name) == nullptr))
      throw Error(ErrorCode::MissingCheckpoint, name);
  }

  const fs::path staging = synthetic_root / (".staging_" + std::to_string(::getpid()));
  std::error_code ec;
  fs::remove_all(staging, ec);
  BalancedDataset out{manifest, split};
  out.manifest.synthetic_root = synthetic_root.string();
  std::vector<std::string> produced;
  try {
    for (const auto& [name, quota] : plan.quotas) {
      if (quota <= 0) continue;
      const auto label = *manifest.find_class(name);
      auto records =
          synthesize_class(*synthesizers.at(name), label, quota, derive_seed(seed, "synthesize", name), staging / name);
      for (auto& r : records) {
        if (out.split.assignment.contains(r.image_id))
          throw Error(ErrorCode::DuplicateId, "synthetic id collides with an existing record: " + r.image_id);
        out.split.assignment.emplace(r.image_id, data::Split::Train);
        out.manifest.records.push_back(std::move(r));
      }
      produced.push_back(name);
    }
    for (const auto& name : produced) {
      const fs::path target = synthetic_root / name;
      fs::remove_all(target);
      fs::rename(staging / name, target);
    }
  } catch (const fs::filesystem_error& e) {
    fs::remove_all(staging, ec);
    throw Error(ErrorCode::IoFailure, e.what());
  } catch (...) {
    fs::remove_all(staging, ec);
    throw;
  }
  fs::remove_all(staging, ec);
  out.manifest.validate();
  return out;
}

}  // namespace skinlab::balance
