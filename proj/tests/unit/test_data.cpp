#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <Eigen/Dense>

#include "doctest.h"
#include "skinlab/data.hpp"
#include "skinlab/error.hpp"
#include "skinlab/image.hpp"
#include "skinlab/rng.hpp"
#include "test_util.hpp"

using namespace skinlab;
using namespace skinlab::data;
using skinlab::testing::TempDir;

namespace {

DatasetManifest synthetic_manifest(const std::map<std::string, long>& counts) {
  DatasetManifest m;
  std::vector<std::string> names;
  for (const auto& [n, c] : counts) names.push_back(n);
  m.class_set = make_class_set(names);
  for (const auto& [name, n] : counts)
    for (long i = 0; i < n; ++i) {
      ImageRecord r;
      r.image_id = name + "_" + std::to_string(i);
      r.relative_path = r.image_id + ".jpg";
      r.label = *m.find_class(name);
      r.width_px = 600;
      r.height_px = 450;
      m.records.push_back(r);
    }
  return m;
}

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::ConfigError;
}

}  // namespace

TEST_CASE("ingest_metadata builds a manifest and reports skipped rows") {
  TempDir dir("ingest");
  PixelArray img(4, 6, RangeTag::Byte, 100.0f);
  for (int i = 0; i < 5; ++i) save_image(img, dir / ("img" + std::to_string(i) + ".png"));

  SUBCASE("all files present") {
    write_file(dir / "meta.csv",
               "image_id,file_name,diagnosis,age\n"
               "a,img0.png,Nevus,40\nb,img1.png,Melanoma_NOS,50\nc,img2.png,Nevus,\n"
               "d,img3.png,Dermatofibroma,61\ne,img4.png,Nevus,22\n");
    auto res = ingest_metadata(dir / "meta.csv", dir.path());
    CHECK(res.manifest.records.size() == 5);
    CHECK(res.skipped.empty());
    REQUIRE(res.manifest.class_set.size() == 3);
    CHECK(res.manifest.class_set[0].name == "Dermatofibroma");
    CHECK(res.manifest.class_set[2].name == "Nevus");
    CHECK(res.manifest.class_set[2].index == 2);
    CHECK(res.manifest.records[0].width_px == 6);
    CHECK(res.manifest.records[0].height_px == 4);
    CHECK(res.manifest.records[0].provenance.at("age") == "40");
  }
  SUBCASE("one file missing") {
    write_file(dir / "meta.csv",
               "image_id,file_name,diagnosis\n"
               "a,img0.png,Nevus\nb,img1.png,Melanoma_NOS\nc,missing.png,Nevus\n"
               "d,img3.png,Dermatofibroma\ne,img4.png,Nevus\n");
    auto res = ingest_metadata(dir / "meta.csv", dir.path());
    CHECK(res.manifest.records.size() == 4);
    REQUIRE(res.skipped.size() == 1);
    CHECK(res.skipped[0].image_id == "c");
    CHECK(res.skipped[0].line == 4);
  }
  SUBCASE("duplicate id") {
    write_file(dir / "meta.csv", "image_id,file_name,diagnosis\na,img0.png,Nevus\na,img1.png,Nevus\n");
    try {
      ingest_metadata(dir / "meta.csv", dir.path());
      FAIL("expected DuplicateId");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::DuplicateId);
      CHECK(std::string(e.what()).find("'a'") != std::string::npos);
    }
  }
  SUBCASE("missing column and empty manifest") {
    write_file(dir / "meta.csv", "image_id,file_name\na,img0.png\n");
    CHECK(code_of([&] { ingest_metadata(dir / "meta.csv", dir.path()); }) == ErrorCode::MissingColumn);
    write_file(dir / "meta.csv", "image_id,file_name,diagnosis\na,nope.png,Nevus\nb,img1.png,\n");
    CHECK(code_of([&] { ingest_metadata(dir / "meta.csv", dir.path()); }) == ErrorCode::EmptyManifest);
  }
  SUBCASE("quoted fields") {
    write_file(dir / "meta.csv",
               "image_id,file_name,diagnosis,localization\r\n"
               "a,img0.png,\"Solar or actinic keratosis\",\"upper, \"\"left\"\"\"\r\n"
               "b,img1.png,Nevus,back\r\n"
               "c,img2.png,Nevus,back\r\n");
    auto res = ingest_metadata(dir / "meta.csv", dir.path());
    CHECK(res.manifest.records[0].label.name == "Solar or actinic keratosis");
    CHECK(res.manifest.records[0].provenance.at("localization") == "upper, \"left\"");
  }
}

TEST_CASE("compute_distribution") {
  auto d = compute_distribution(synthetic_manifest({{"A", 100}, {"B", 40}, {"C", 10}}));
  CHECK(d.majority_class.name == "A");
  CHECK(d.imbalance_ratio == 10.0);
  CHECK(d.total() == 150);

  auto tie = compute_distribution(synthetic_manifest({{"B", 5}, {"A", 5}}));
  CHECK(tie.majority_class.name == "A");
  CHECK(tie.imbalance_ratio == 1.0);

  auto single = compute_distribution(synthetic_manifest({{"A", 7}}));
  CHECK(single.counts.at("A") == 7);
  CHECK(single.imbalance_ratio == 1.0);

  CHECK(code_of([] { compute_distribution(DatasetManifest{}); }) == ErrorCode::EmptyManifest);
}

TEST_CASE("apportion follows largest remainder with the fixed tie order") {
  const std::array<double, 3> r{0.7, 0.15, 0.15};
  CHECK(apportion(100, r) == std::array<long, 3>{70, 15, 15});
  CHECK(apportion(20, r) == std::array<long, 3>{14, 3, 3});
  // quotas 7, 1.5, 1.5: remainders tie, test wins before validation
  CHECK(apportion(10, r) == std::array<long, 3>{7, 1, 2});
  // quotas 2.1, 0.45, 0.45
  CHECK(apportion(3, r) == std::array<long, 3>{2, 0, 1});
  CHECK(code_of([] { apportion(10, {0.5, 0.3, 0.3}); }) == ErrorCode::RatioSum);
  CHECK(code_of([] { apportion(10, {1.0, 0.0, 0.0}); }) == ErrorCode::RatioSum);
}

TEST_CASE("stratified_split counts, partition and determinism") {
  auto m = synthetic_manifest({{"A", 100}, {"B", 20}});
  auto s = stratified_split(m, {0.7, 0.15, 0.15}, 42);
  std::map<std::string, std::array<long, 3>> per;
  for (const auto& r : m.records) ++per[r.label.name][static_cast<int>(s.assignment.at(r.image_id))];
  CHECK(per["A"] == std::array<long, 3>{70, 15, 15});
  CHECK(per["B"] == std::array<long, 3>{14, 3, 3});
  CHECK(s.assignment.size() == m.records.size());

  auto again = stratified_split(m, {0.7, 0.15, 0.15}, 42);
  CHECK(to_json(again).dump() == to_json(s).dump());
  auto other = stratified_split(m, {0.7, 0.15, 0.15}, 43);
  CHECK(other.assignment != s.assignment);

  // manifest order does not matter
  auto shuffled = m;
  std::reverse(shuffled.records.begin(), shuffled.records.end());
  CHECK(stratified_split(shuffled, {0.7, 0.15, 0.15}, 42).assignment == s.assignment);

  try {
    stratified_split(synthetic_manifest({{"A", 10}, {"Tiny", 2}}), {0.7, 0.15, 0.15}, 1);
    FAIL("expected ClassTooSmall");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ClassTooSmall);
    CHECK(std::string(e.what()).find("Tiny") != std::string::npos);
  }

  SUBCASE("synthetic records always train") {
    auto withsyn = m;
    ImageRecord syn = m.records.back();
    syn.image_id = "syn_0";
    syn.source = Source::Synthetic;
    withsyn.records.push_back(syn);
    auto s2 = stratified_split(withsyn, {0.7, 0.15, 0.15}, 42);
    CHECK(s2.assignment.at("syn_0") == Split::Train);
  }
}

TEST_CASE("manifest and split JSON round trip") {
  auto m = synthetic_manifest({{"A", 4}, {"B", 3}});
  m.records[0].provenance["age"] = "30";
  m.created_at = "2026-01-01T00:00:00Z";
  CHECK(manifest_from_json(to_json(m)) == m);
  auto s = stratified_split(m, {0.7, 0.15, 0.15}, 3);
  CHECK(split_from_json(to_json(s)) == s);
  CHECK(to_json(m).at("schema_version") == kManifestSchemaVersion);
  // stable key ordering: dump is reproducible and keys sorted
  const std::string text = to_json(m).dump();
  CHECK(text.find("\"class_set\"") < text.find("\"records\""));
}

TEST_CASE("organize_per_class partitions records and is idempotent") {
  TempDir dir("organize");
  auto m = synthetic_manifest({{"A", 3}, {"B", 2}});
  m.image_root = (dir / "src").string();
  PixelArray img(2, 2, RangeTag::Byte, 10.0f);
  for (const auto& r : m.records) save_image(img, std::filesystem::path(m.image_root) / r.relative_path);

  auto count_files = [](const std::filesystem::path& p) {
    return std::distance(std::filesystem::directory_iterator(p), std::filesystem::directory_iterator{});
  };
  organize_per_class(m, dir / "out");
  CHECK(count_files(dir / "out/A") == 3);
  CHECK(count_files(dir / "out/B") == 2);
  organize_per_class(m, dir / "out");
  CHECK(count_files(dir / "out/A") == 3);
  CHECK(count_files(dir / "out/B") == 2);

  auto empty_class = m;
  empty_class.class_set = make_class_set({"A", "B", "C"});
  for (auto& r : empty_class.records) r.label = *empty_class.find_class(r.label.name);
  CHECK(code_of([&] { organize_per_class(empty_class, dir / "out2"); }) == ErrorCode::ClassTooSmall);
  CHECK_FALSE(std::filesystem::exists(dir / "out2"));
}

TEST_CASE("toy dataset: imbalance, determinism and class separability") {
  TempDir dir("toy");
  auto m = generate_toy_dataset(dir / "a", 7, {100, 20, 20, 20, 20, 20, 20}, 11);
  CHECK(m.records.size() == 220);
  CHECK(std::filesystem::exists(dir / "a/metadata.csv"));
  auto d = compute_distribution(m);
  CHECK(d.majority_class.name == "class_0");
  CHECK(d.imbalance_ratio == 5.0);
  CHECK(m.records[0].width_px == 600);
  CHECK(m.records[0].height_px == 450);

  SUBCASE("same seed gives identical pixels") {
    auto m2 = generate_toy_dataset(dir / "b", 7, {2, 1, 1, 1, 1, 1, 1}, 11);
    for (const auto& r : m2.records) {
      auto a = load_image(m.resolve(*std::find_if(m.records.begin(), m.records.end(),
                                                  [&](const auto& x) { return x.image_id == r.image_id; })));
      CHECK(load_image(m2.resolve(r)) == a);
    }
  }

  SUBCASE("linear probe at 64x64 separates the classes") {
    // Ridge-regression one-vs-rest probe on raw 64x64 pixels, fitted on even
    // indices and scored on odd ones, 20 images per class.
    std::vector<Eigen::VectorXd> feats;
    std::vector<int> labels, index_in_class;
    std::map<int, int> seen;
    for (const auto& r : m.records) {
      if (seen[r.label.index] >= 20) continue;
      index_in_class.push_back(seen[r.label.index]++);
      auto img = to_unit(resize_image(load_image(m.resolve(r)), 64, 64));
      Eigen::VectorXd f(img.values().size());
      for (std::size_t i = 0; i < img.values().size(); ++i) f[static_cast<Eigen::Index>(i)] = img.values()[i];
      feats.push_back(f);
      labels.push_back(r.label.index);
    }
    std::vector<std::size_t> train, test;
    for (std::size_t i = 0; i < feats.size(); ++i) (index_in_class[i] % 2 == 0 ? train : test).push_back(i);
    const auto n = static_cast<Eigen::Index>(train.size());
    const auto dims = feats[0].size();
    Eigen::MatrixXd X(n, dims), Y = Eigen::MatrixXd::Zero(n, 7);
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(dims);
    for (auto i : train) mean += feats[i];
    mean /= static_cast<double>(n);
    for (Eigen::Index r = 0; r < n; ++r) {
      X.row(r) = (feats[train[r]] - mean).transpose();
      Y(r, labels[train[r]]) = 1.0;
    }
    // Strong shrinkage: with 70 samples in 12288 dims the probe behaves like a
    // centroid classifier.
    const Eigen::MatrixXd gram = X * X.transpose() + 1e4 * Eigen::MatrixXd::Identity(n, n);
    const Eigen::MatrixXd alpha = gram.ldlt().solve(Y);
    int correct = 0;
    for (auto i : test) {
      const Eigen::VectorXd k = X * (feats[i] - mean);
      Eigen::VectorXd scores = alpha.transpose() * k;
      Eigen::Index best;
      scores.maxCoeff(&best);
      correct += best == labels[i];
    }
    const double acc = static_cast<double>(correct) / static_cast<double>(test.size());
    INFO("probe accuracy " << acc);
    CHECK(acc > 0.9);
  }
}
