#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace skinlab::data {

inline constexpr int kManifestSchemaVersion = 1;

struct ClassLabel {
  std::string name;
  int index = 0;
  friend bool operator==(const ClassLabel&, const ClassLabel&) = default;
};

enum class Source { Real, Synthetic };
enum class Split { Train, Validation, Test };

std::string_view to_string(Source s);
std::string_view to_string(Split s);
Split split_from_string(std::string_view s);

struct ImageRecord {
  std::string image_id;
  std::string relative_path;
  ClassLabel label;
  Source source = Source::Real;
  int width_px = 0;
  int height_px = 0;
  // Extra CSV columns for real images; generating checkpoint id for synthetic ones.
  std::map<std::string, std::string> provenance;
  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

struct DatasetManifest {
  std::vector<ImageRecord> records;
  std::vector<ClassLabel> class_set;  // sorted by name; index == position
  std::string created_at;
  std::uint64_t seed = 0;
  // Real records resolve against image_root, synthetic ones against synthetic_root.
  std::string image_root;
  std::string synthetic_root;

  std::optional<ClassLabel> find_class(std::string_view name) const;
  std::filesystem::path resolve(const ImageRecord& r) const;
  // Throws DuplicateId / UnknownLabel when the manifest invariants are broken.
  void validate() const;
  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

// Builds the index assignment for a set of names (sorted lexicographically).
std::vector<ClassLabel> make_class_set(std::vector<std::string> names);

struct ClassDistribution {
  std::map<std::string, long> counts;  // every class of the class set, zero included
  ClassLabel majority_class;
  double imbalance_ratio = 1.0;        // max / min; infinite when a class is empty

  long total() const;
  long majority_count() const { return counts.at(majority_class.name); }
};

struct SplitManifest {
  std::map<std::string, Split> assignment;
  std::array<double, 3> ratios{0.70, 0.15, 0.15};
  std::uint64_t seed = 0;

  std::vector<std::string> ids_in(Split s) const;
  friend bool operator==(const SplitManifest&, const SplitManifest&) = default;
};

struct SkippedRow {
  long line = 0;  // 1-based line number in the CSV, header is line 1
  std::string image_id;
  std::string reason;
};

struct IngestResult {
  DatasetManifest manifest;
  std::vector<SkippedRow> skipped;
};

// CSV with at least image_id, file_name, diagnosis. Rows whose file is missing
// or whose diagnosis is blank are skipped and reported.
IngestResult ingest_metadata(const std::filesystem::path& csv_path, const std::filesystem::path& image_root,
                             std::uint64_t seed = 0);

ClassDistribution compute_distribution(const DatasetManifest& manifest);
// Distribution over the records assigned to one split (synthetic records included).
ClassDistribution compute_distribution(const DatasetManifest& manifest, const SplitManifest& split, Split which);

// Largest-remainder allocation of `count` items over (train, validation, test);
// remainder ties go to test, then validation, then train.
std::array<long, 3> apportion(long count, const std::array<double, 3>& ratios);

SplitManifest stratified_split(const DatasetManifest& manifest, const std::array<double, 3>& ratios,
                               std::uint64_t seed);

// Copies every record into out_root/<class name>/; returns out_root.
std::filesystem::path organize_per_class(const DatasetManifest& manifest, const std::filesystem::path& out_root);

// Procedural desk-scale dataset: 600x450 JPEG lesions whose shape eccentricity,
// hue band and border irregularity encode the class, plus metadata.csv.
DatasetManifest generate_toy_dataset(const std::filesystem::path& out_root, int classes,
                                     const std::vector<long>& per_class_counts, std::uint64_t seed);
std::string toy_class_name(int index, int classes);

// Persistence (stable key order, schema_version field).
nlohmann::json to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SplitManifest& s);
SplitManifest split_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ClassDistribution& d);

void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json_file(const std::filesystem::path& path);

// Minimal RFC 4180 reader: quoted fields, doubled quotes, CRLF.
std::vector<std::vector<std::string>> parse_csv(std::string_view text);
std::string csv_escape(std::string_view field);

std::string utc_timestamp();

}  // namespace skinlab::data
