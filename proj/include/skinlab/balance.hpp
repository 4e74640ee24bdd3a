#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "skinlab/data.hpp"
#include "skinlab/gan.hpp"
#include "skinlab/image.hpp"

namespace skinlab::balance {

inline constexpr int kSyntheticSize = 224;

struct SynthesisPlan {
  std::map<std::string, long> quotas;  // class name -> images to generate
  long majority_count = 0;
  data::ClassDistribution basis;

  long total() const;
};

// quota(c) = majority_count - count(c). `dist` should cover the training split only.
SynthesisPlan plan_synthesis(const data::ClassDistribution& dist);

nlohmann::json to_json(const SynthesisPlan& plan);
SynthesisPlan plan_from_json(const nlohmann::json& j);

// Source of generated images for one class. sample() returns images in
// [-1, 1]; image n of a seed is the same whatever batch it is drawn in.
class Synthesizer {
 public:
  virtual ~Synthesizer() = default;
  virtual std::string class_name() const = 0;
  virtual std::string source_id() const = 0;
  virtual std::vector<PixelArray> sample(std::uint64_t seed, long first, long count) = 0;
};

class GanSynthesizer final : public Synthesizer {
 public:
  explicit GanSynthesizer(gan::GanCheckpoint ckpt);
  std::string class_name() const override { return ckpt_.class_name; }
  std::string source_id() const override { return ckpt_.id(); }
  std::vector<PixelArray> sample(std::uint64_t seed, long first, long count) override;

 private:
  gan::GanCheckpoint ckpt_;
  std::unique_ptr<nn::Sequential> generator_;
};

// Writes `quota` 224x224 PNGs named <source_id>_<n>.png into out_dir, whose
// last component must be the synthesizer's class. Records are relative to
// out_dir's parent (the synthetic root).
std::vector<data::ImageRecord> synthesize_class(Synthesizer& synth, const data::ClassLabel& label, long quota,
                                                std::uint64_t seed, const std::filesystem::path& out_dir);
std::vector<data::ImageRecord> synthesize_class(const gan::GanCheckpoint& ckpt, const data::ClassLabel& label,
                                                long quota, std::uint64_t seed, const std::filesystem::path& out_dir);

struct BalancedDataset {
  data::DatasetManifest manifest;
  data::SplitManifest split;
};

// Generates every positive quota into synthetic_root/<class>/ and returns the
// manifest and split with the synthetic records appended to the training
// split. All images are staged first; on any failure nothing under
// synthetic_root changes. MissingCheckpoint names the first class lacking a
// synthesizer.
BalancedDataset apply_plan(const data::DatasetManifest& manifest, const data::SplitManifest& split,
                           const SynthesisPlan& plan, const std::map<std::string, Synthesizer*>& synthesizers,
                           const std::filesystem::path& synthetic_root, std::uint64_t seed);

}  // namespace skinlab::balance
