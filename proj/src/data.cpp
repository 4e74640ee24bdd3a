#include "skinlab/data.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "skinlab/error.hpp"
#include "skinlab/image.hpp"
#include "skinlab/rng.hpp"

namespace fs = std::filesystem;

namespace skinlab::data {

std::string_view to_string(Source s) { return s == Source::Real ? "real" : "synthetic"; }

std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Validation: return "validation";
    case Split::Test: return "test";
  }
  return "train";
}

Split split_from_string(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "validation") return Split::Validation;
  if (s == "test") return Split::Test;
  throw Error(ErrorCode::ConfigError, "unknown split name '" + std::string(s) + "'");
}

std::optional<ClassLabel> DatasetManifest::find_class(std::string_view name) const {
  for (const auto& c : class_set)
    if (c.name == name) return c;
  return std::nullopt;
}

fs::path DatasetManifest::resolve(const ImageRecord& r) const {
  const fs::path rel(r.relative_path);
  if (rel.is_absolute()) return rel;
  return fs::path(r.source == Source::Real ? image_root : synthetic_root) / rel;
}

void DatasetManifest::validate() const {
  std::set<std::string> ids;
  for (const auto& r : records) {
    if (!ids.insert(r.image_id).second) throw Error(ErrorCode::DuplicateId, "duplicate image_id '" + r.image_id + "'");
    auto c = find_class(r.label.name);
    if (!c || c->index != r.label.index)
      throw Error(ErrorCode::UnknownLabel, "record '" + r.image_id + "' has label outside the class set");
  }
}

std::vector<ClassLabel> make_class_set(std::vector<std::string> names) {
  std::sort(names.begin(), names.end());
  names.erase(std::unique(names.begin(), names.end()), names.end());
  std::vector<ClassLabel> out;
  for (std::size_t i = 0; i < names.size(); ++i) out.push_back({names[i], static_cast<int>(i)});
  return out;
}

long ClassDistribution::total() const {
  long t = 0;
  for (const auto& [name, n] : counts) t += n;
  return t;
}

std::vector<std::string> SplitManifest::ids_in(Split s) const {
  std::vector<std::string> out;
  for (const auto& [id, split] : assignment)
    if (split == s) out.push_back(id);
  return out;
}

// ---------------------------------------------------------------- CSV

std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += ch;
      }
      continue;
    }
    if (ch == '"') {
      quoted = true;
      any = true;
    } else if (ch == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (ch == '\n' || ch == '\r') {
      if (ch == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (any || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
      } else {
        rows.emplace_back();  // keep line numbering for blank lines
      }
      row.clear();
      field.clear();
      any = false;
    } else {
      field += ch;
      any = true;
    }
  }
  if (any || !field.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string csv_escape(std::string_view field) {
  if (field.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(field);
  std::string out = "\"";
  for (char ch : field) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// ---------------------------------------------------------------- ingestion

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  std::string text = ss.str();
  if (text.starts_with("\xEF\xBB\xBF")) text.erase(0, 3);
  return text;
}

}  // namespace

IngestResult ingest_metadata(const fs::path& csv_path, const fs::path& image_root, std::uint64_t seed) {
  const auto rows = parse_csv(read_text(csv_path));
  if (rows.empty()) throw Error(ErrorCode::MissingColumn, "CSV " + csv_path.string() + " has no header");
  const auto& header = rows.front();
  std::map<std::string, std::size_t> column;
  for (std::size_t i = 0; i < header.size(); ++i) column[trim(header[i])] = i;
  for (const char* required : {"image_id", "file_name", "diagnosis"})
    if (!column.count(required))
      throw Error(ErrorCode::MissingColumn, std::string("CSV header lacks required column '") + required + "'");
  const std::size_t id_col = column["image_id"], file_col = column["file_name"], diag_col = column["diagnosis"];

  std::error_code ec;
  if (!fs::is_directory(image_root, ec)) throw Error(ErrorCode::IoFailure, "image root not readable: " + image_root.string());

  IngestResult result;
  std::set<std::string> seen;
  std::vector<ImageRecord> records;
  std::vector<std::string> names;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    const long line = static_cast<long>(r) + 1;
    if (row.empty()) continue;
    auto cell = [&](std::size_t i) { return i < row.size() ? trim(row[i]) : std::string(); };
    const std::string id = cell(id_col);
    if (id.empty()) {
      result.skipped.push_back({line, "", "empty image_id"});
      continue;
    }
    if (!seen.insert(id).second) throw Error(ErrorCode::DuplicateId, "duplicate image_id '" + id + "'");
    const std::string diagnosis = cell(diag_col);
    const std::string file = cell(file_col);
    if (diagnosis.empty()) {
      result.skipped.push_back({line, id, "empty diagnosis"});
      continue;
    }
    const fs::path full = image_root / file;
    if (file.empty() || !fs::is_regular_file(full, ec)) {
      result.skipped.push_back({line, id, "file not found: " + full.string()});
      continue;
    }
    int h = 0, w = 0;
    try {
      std::tie(h, w) = probe_image_size(full);
    } catch (const Error&) {
      result.skipped.push_back({line, id, "unreadable image: " + full.string()});
      continue;
    }
    ImageRecord rec;
    rec.image_id = id;
    rec.relative_path = file;
    rec.label.name = diagnosis;
    rec.source = Source::Real;
    rec.width_px = w;
    rec.height_px = h;
    for (const auto& [name, idx] : column)
      if (idx != id_col && idx != file_col && idx != diag_col && !name.empty()) rec.provenance[name] = cell(idx);
    names.push_back(diagnosis);
    records.push_back(std::move(rec));
  }
  if (records.empty()) throw Error(ErrorCode::EmptyManifest, "no valid rows in " + csv_path.string());

  DatasetManifest& m = result.manifest;
  m.class_set = make_class_set(names);
  for (auto& rec : records) rec.label = *m.find_class(rec.label.name);
  m.records = std::move(records);
  m.created_at = utc_timestamp();
  m.seed = seed;
  m.image_root = fs::absolute(image_root).lexically_normal().string();
  return result;
}

// ---------------------------------------------------------------- distribution

namespace {

ClassDistribution finish_distribution(const std::vector<ClassLabel>& class_set, std::map<std::string, long> counts) {
  ClassDistribution d;
  d.counts = std::move(counts);
  long best = -1, worst = std::numeric_limits<long>::max();
  for (const auto& c : class_set) {  // class_set is name-sorted: first maximum wins ties
    const long n = d.counts[c.name];
    if (n > best) {
      best = n;
      d.majority_class = c;
    }
    worst = std::min(worst, n);
  }
  d.imbalance_ratio = worst > 0 ? static_cast<double>(best) / static_cast<double>(worst)
                                : std::numeric_limits<double>::infinity();
  return d;
}

}  // namespace

ClassDistribution compute_distribution(const DatasetManifest& manifest) {
  if (manifest.records.empty()) throw Error(ErrorCode::EmptyManifest, "cannot compute distribution of empty manifest");
  std::map<std::string, long> counts;
  for (const auto& c : manifest.class_set) counts[c.name] = 0;
  for (const auto& r : manifest.records) ++counts[r.label.name];
  return finish_distribution(manifest.class_set, std::move(counts));
}

ClassDistribution compute_distribution(const DatasetManifest& manifest, const SplitManifest& split, Split which) {
  std::map<std::string, long> counts;
  for (const auto& c : manifest.class_set) counts[c.name] = 0;
  long total = 0;
  for (const auto& r : manifest.records) {
    auto it = split.assignment.find(r.image_id);
    if (it != split.assignment.end() && it->second == which) {
      ++counts[r.label.name];
      ++total;
    }
  }
  if (total == 0)
    throw Error(ErrorCode::EmptySplit, "split '" + std::string(to_string(which)) + "' has no records");
  return finish_distribution(manifest.class_set, std::move(counts));
}

// ---------------------------------------------------------------- splitting

namespace {

void check_ratios(const std::array<double, 3>& ratios) {
  double sum = 0.0;
  for (double r : ratios) {
    if (!(r > 0.0) || !std::isfinite(r)) throw Error(ErrorCode::RatioSum, "split ratios must be positive");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw Error(ErrorCode::RatioSum, "split ratios sum to " + std::to_string(sum));
}

}  // namespace

std::array<long, 3> apportion(long count, const std::array<double, 3>& ratios) {
  check_ratios(ratios);
  constexpr double kTol = 1e-9;
  std::array<long, 3> seats{};
  std::array<double, 3> remainder{};
  long assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const double quota = ratios[i] * static_cast<double>(count);
    seats[i] = static_cast<long>(std::floor(quota + kTol));
    remainder[i] = std::max(0.0, quota - static_cast<double>(seats[i]));
    assigned += seats[i];
  }
  // Priority when remainders tie: test (2), validation (1), train (0).
  std::array<int, 3> order{2, 1, 0};
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return remainder[a] > remainder[b] + kTol; });
  for (long k = 0; k < count - assigned; ++k) ++seats[order[static_cast<std::size_t>(k % 3)]];
  return seats;
}

SplitManifest stratified_split(const DatasetManifest& manifest, const std::array<double, 3>& ratios,
                               std::uint64_t seed) {
  check_ratios(ratios);
  std::map<std::string, std::vector<std::string>> by_class;
  for (const auto& c : manifest.class_set) by_class[c.name];
  SplitManifest out;
  out.ratios = ratios;
  out.seed = seed;
  for (const auto& r : manifest.records) {
    if (r.source == Source::Synthetic)
      out.assignment[r.image_id] = Split::Train;
    else
      by_class[r.label.name].push_back(r.image_id);
  }
  for (const auto& [name, ids] : by_class)
    if (ids.size() < 3)
      throw Error(ErrorCode::ClassTooSmall, "class '" + name + "' has " + std::to_string(ids.size()) +
                                                " real records; at least 3 are required");
  for (auto& [name, ids] : by_class) {
    std::sort(ids.begin(), ids.end());
    Rng rng(derive_seed(seed, "split", name));
    rng.shuffle(std::span<std::string>(ids));
    const auto seats = apportion(static_cast<long>(ids.size()), ratios);
    std::size_t i = 0;
    for (int s = 0; s < 3; ++s)
      for (long k = 0; k < seats[s]; ++k) out.assignment[ids[i++]] = static_cast<Split>(s);
  }
  return out;
}

// ---------------------------------------------------------------- per-class folders

fs::path organize_per_class(const DatasetManifest& manifest, const fs::path& out_root) {
  std::map<std::string, long> counts;
  for (const auto& c : manifest.class_set) counts[c.name] = 0;
  for (const auto& r : manifest.records) ++counts[r.label.name];
  for (const auto& [name, n] : counts)
    if (n == 0) throw Error(ErrorCode::ClassTooSmall, "class '" + name + "' has no records to organize");
  std::error_code ec;
  for (const auto& c : manifest.class_set) {
    fs::create_directories(out_root / c.name, ec);
    if (ec) throw Error(ErrorCode::IoFailure, "cannot create " + (out_root / c.name).string() + ": " + ec.message());
  }
  for (const auto& r : manifest.records) {
    const fs::path src = manifest.resolve(r);
    const fs::path dst = out_root / r.label.name / (r.image_id + src.extension().string());
    fs::copy_file(src, dst, fs::copy_options::overwrite_existing, ec);
    if (ec) throw Error(ErrorCode::IoFailure, "cannot copy " + src.string() + " -> " + dst.string() + ": " + ec.message());
  }
  return out_root;
}

// ---------------------------------------------------------------- JSON

nlohmann::json to_json(const DatasetManifest& m) {
  nlohmann::json records = nlohmann::json::array();
  for (const auto& r : m.records) {
    records.push_back({{"image_id", r.image_id},
                       {"relative_path", r.relative_path},
                       {"label", r.label.name},
                       {"source", to_string(r.source)},
                       {"width_px", r.width_px},
                       {"height_px", r.height_px},
                       {"provenance", r.provenance}});
  }
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : m.class_set) classes.push_back(c.name);
  return {{"schema_version", kManifestSchemaVersion},
          {"created_at", m.created_at},
          {"seed", m.seed},
          {"image_root", m.image_root},
          {"synthetic_root", m.synthetic_root},
          {"class_set", classes},
          {"records", records}};
}

DatasetManifest manifest_from_json(const nlohmann::json& j) {
  try {
    if (j.at("schema_version").get<int>() != kManifestSchemaVersion)
      throw Error(ErrorCode::ConfigError, "unsupported manifest schema_version");
    DatasetManifest m;
    m.created_at = j.at("created_at").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.image_root = j.at("image_root").get<std::string>();
    m.synthetic_root = j.value("synthetic_root", "");
    m.class_set = make_class_set(j.at("class_set").get<std::vector<std::string>>());
    for (const auto& rj : j.at("records")) {
      ImageRecord r;
      r.image_id = rj.at("image_id").get<std::string>();
      r.relative_path = rj.at("relative_path").get<std::string>();
      auto label = m.find_class(rj.at("label").get<std::string>());
      if (!label) throw Error(ErrorCode::UnknownLabel, "record '" + r.image_id + "' label not in class_set");
      r.label = *label;
      r.source = rj.at("source").get<std::string>() == "synthetic" ? Source::Synthetic : Source::Real;
      r.width_px = rj.at("width_px").get<int>();
      r.height_px = rj.at("height_px").get<int>();
      r.provenance = rj.value("provenance", std::map<std::string, std::string>{});
      m.records.push_back(std::move(r));
    }
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("malformed manifest JSON: ") + e.what());
  }
}

nlohmann::json to_json(const SplitManifest& s) {
  nlohmann::json assignment = nlohmann::json::object();
  for (const auto& [id, split] : s.assignment) assignment[id] = to_string(split);
  return {{"schema_version", kManifestSchemaVersion}, {"seed", s.seed}, {"ratios", s.ratios}, {"assignment", assignment}};
}

SplitManifest split_from_json(const nlohmann::json& j) {
  try {
    SplitManifest s;
    s.seed = j.at("seed").get<std::uint64_t>();
    s.ratios = j.at("ratios").get<std::array<double, 3>>();
    for (const auto& [id, v] : j.at("assignment").items()) s.assignment[id] = split_from_string(v.get<std::string>());
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("malformed split JSON: ") + e.what());
  }
}

nlohmann::json to_json(const ClassDistribution& d) {
  return {{"counts", d.counts},
          {"majority_class", d.majority_class.name},
          {"imbalance_ratio", std::isfinite(d.imbalance_ratio) ? nlohmann::json(d.imbalance_ratio) : nlohmann::json()}};
}

void write_json_file(const fs::path& path, const nlohmann::json& j) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + tmp.string());
    out << j.dump(2) << "\n";
    if (!out) throw Error(ErrorCode::IoFailure, "short write to " + tmp.string());
  }
  fs::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::IoFailure, "cannot rename " + tmp.string() + ": " + ec.message());
}

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigError, "invalid JSON in " + path.string() + ": " + e.what());
  }
}

}  // namespace skinlab::data
