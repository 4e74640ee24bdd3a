#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <span>

#include <opencv2/imgcodecs.hpp>

#include "doctest.h"
#include "skinlab/error.hpp"
#include "skinlab/metrics.hpp"
#include "skinlab/rng.hpp"
#include "test_util.hpp"

using namespace skinlab;
using namespace skinlab::metrics;
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

std::vector<std::string> names(int k) {
  std::vector<std::string> out;
  for (int i = 0; i < k; ++i) out.push_back("c" + std::to_string(i));
  return out;
}

// All ordered pairs (positive, negative); ties score one half.
double pairwise_auc(const std::vector<double>& s, const std::vector<bool>& pos) {
  double num = 0.0;
  long pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!pos[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (pos[j]) continue;
      ++pairs;
      if (s[i] > s[j]) num += 1.0;
      else if (s[i] == s[j]) num += 0.5;
    }
  }
  return num / static_cast<double>(pairs);
}

nn::Tensor random_probs(Rng& rng, int n, int k, bool coarse) {
  nn::Tensor p({n, k});
  for (int i = 0; i < n; ++i) {
    double sum = 0.0;
    std::vector<double> row(static_cast<std::size_t>(k));
    for (auto& v : row) {
      // Coarse values force many ties.
      v = coarse ? static_cast<double>(rng.below(4) + 1) : rng.uniform(0.01, 1.0);
      sum += v;
    }
    for (int c = 0; c < k; ++c) p[static_cast<std::size_t>(i * k + c)] = static_cast<float>(row[c] / sum);
  }
  return p;
}

}  // namespace

TEST_CASE("confusion and per-class metrics on the hand-counted example") {
  const std::vector<std::string> order{"0", "1"};
  const std::vector<std::string> truth{"1", "1", "1", "1", "1", "0", "0", "0", "0", "0"};
  const std::vector<std::string> pred{"1", "1", "1", "0", "0", "0", "0", "0", "0", "1"};
  const auto cm = confusion_from_predictions(truth, pred, order);
  CHECK(cm.counts == std::vector<std::vector<long>>{{4, 1}, {2, 3}});
  CHECK(cm.total() == 10);
  const auto pc = per_class_metrics(cm);
  const auto& c1 = pc.at("1");
  CHECK(c1.tp == 3);
  CHECK(c1.fp == 1);
  CHECK(c1.fn == 2);
  CHECK(c1.precision == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(c1.recall == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(std::abs(c1.f1 - 2.0 / 3.0) < 1e-12);
  const auto m = macro_metrics(pc, cm);
  CHECK(m.accuracy == doctest::Approx(0.7));

  const auto diag = confusion_from_predictions({"0", "1", "1"}, {"0", "1", "1"}, order);
  for (const auto& [k, v] : per_class_metrics(diag)) {
    CHECK(v.precision == 1.0);
    CHECK(v.recall == 1.0);
    CHECK(v.f1 == 1.0);
  }
  CHECK(macro_metrics(per_class_metrics(diag), diag).accuracy == 1.0);
}

TEST_CASE("degenerate and error cases") {
  const std::vector<std::string> order{"a", "b", "c"};
  const auto empty = confusion_from_predictions({}, {}, order);
  CHECK(empty.total() == 0);
  CHECK(code_of([&] { per_class_metrics(empty); }) == ErrorCode::EmptyMatrix);
  CHECK(code_of([&] { confusion_from_predictions({"a"}, {"z"}, order); }) == ErrorCode::UnknownLabel);

  // "c" never occurs in truth or prediction.
  const auto cm = confusion_from_predictions({"a", "b"}, {"a", "b"}, order);
  const auto pc = per_class_metrics(cm);
  CHECK(pc.at("c").precision == 0.0);
  CHECK(pc.at("c").recall == 0.0);
  CHECK(pc.at("c").f1 == 0.0);
  CHECK(pc.at("c").degenerate);
  CHECK_FALSE(pc.at("a").degenerate);

  std::map<std::string, ClassMetrics> two{{"x", {1.0, 1.0, 1.0}}, {"y", {0.5, 0.5, 0.5}}};
  CHECK(macro_metrics(two, cm).macro_f1 == 0.75);

  const auto single = confusion_from_predictions({"a", "a"}, {"a", "a"}, {"a"});
  const auto sm = macro_metrics(per_class_metrics(single), single);
  CHECK(sm.macro_precision == 1.0);
  CHECK(sm.macro_f1 == 1.0);
}

TEST_CASE("binary AUC examples") {
  const std::vector<double> s{0.9, 0.8, 0.3, 0.1};
  CHECK(binary_auc(s, {true, true, false, false}) == 1.0);
  CHECK(binary_auc(s, {true, false, true, false}) == 0.75);
  CHECK(binary_auc({0.4, 0.4, 0.4, 0.4}, {true, false, true, false}) == 0.5);
  CHECK(code_of([&] { binary_auc(s, {true, true, true, true}); }) == ErrorCode::DegenerateLabels);

  nn::Tensor p({4, 2}, {0.1f, 0.9f, 0.2f, 0.8f, 0.7f, 0.3f, 0.9f, 0.1f});
  const auto r = auc_ovr(p, {1, 1, 0, 0}, {"n", "p"});
  CHECK(r.macro == 1.0);
  CHECK(code_of([&] { auc_ovr(p, {1, 1, 1, 1}, {"n", "p"}); }) == ErrorCode::DegenerateLabels);

  // A class absent from the labels is skipped.
  nn::Tensor q({4, 3}, 1.0f / 3.0f);
  const auto r3 = auc_ovr(q, {0, 1, 0, 1}, {"a", "b", "c"});
  CHECK(r3.skipped == std::vector<std::string>{"c"});
  CHECK(r3.per_class.size() == 2);
  CHECK(r3.macro == 0.5);
}

TEST_CASE("brute-force recount and pairwise AUC oracle on 100 random sets") {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(derive_seed(2024, "metrics-oracle"));
  double worst_auc = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int k = 2 + static_cast<int>(rng.below(6));
    const int n = 1 + static_cast<int>(rng.below(200));
    const auto order = names(k);
    std::vector<int> truth(static_cast<std::size_t>(n)), pred(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      truth[i] = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
      pred[i] = rng.uniform(0, 1) < 0.6 ? truth[i] : static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
    }
    const auto cm = confusion_from_indices(truth, pred, order);
    const auto pc = per_class_metrics(cm);
    const auto mm = macro_metrics(pc, cm);

    long correct = 0;
    double sp = 0, sr = 0, sf = 0;
    for (int c = 0; c < k; ++c) {
      long tp = 0, fp = 0, fn = 0;
      for (int i = 0; i < n; ++i) {
        CHECK(cm.counts[truth[i]][pred[i]] >= 1);
        if (truth[i] == c && pred[i] == c) ++tp;
        if (truth[i] != c && pred[i] == c) ++fp;
        if (truth[i] == c && pred[i] != c) ++fn;
      }
      long cell_sum = 0;
      for (int j = 0; j < k; ++j) {
        long direct = 0;
        for (int i = 0; i < n; ++i) direct += truth[i] == c && pred[i] == j;
        REQUIRE(cm.counts[c][j] == direct);
        cell_sum += direct;
      }
      CHECK(cell_sum == tp + fn);
      correct += tp;
      const double p = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
      const double r = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
      const double f = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
      const auto& m = pc.at(order[c]);
      REQUIRE(m.tp == tp);
      REQUIRE(m.fp == fp);
      REQUIRE(m.fn == fn);
      CHECK(m.precision == p);
      CHECK(m.recall == r);
      CHECK(m.f1 == f);
      CHECK(m.degenerate == (tp + fp == 0 || tp + fn == 0));
      for (double v : {m.precision, m.recall, m.f1}) CHECK((v >= 0.0 && v <= 1.0));
      sp += p;
      sr += r;
      sf += f;
    }
    CHECK(mm.accuracy == static_cast<double>(correct) / n);
    CHECK(std::abs(mm.macro_precision - sp / k) < 1e-12);
    CHECK(std::abs(mm.macro_recall - sr / k) < 1e-12);
    CHECK(std::abs(mm.macro_f1 - sf / k) < 1e-12);
    bool diagonal = true;
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < k; ++j)
        if (i != j && cm.counts[i][j]) diagonal = false;
    CHECK((mm.accuracy == 1.0) == diagonal);

    const auto probs = random_probs(rng, n, k, trial % 2 == 0);
    std::set<int> present(truth.begin(), truth.end());
    if (present.size() < 2) {
      CHECK(code_of([&] { auc_ovr(probs, truth, order); }) == ErrorCode::DegenerateLabels);
      continue;
    }
    const auto auc = auc_ovr(probs, truth, order);
    double sum = 0.0;
    int used = 0;
    for (int c = 0; c < k; ++c) {
      if (!present.count(c) || static_cast<int>(std::count(truth.begin(), truth.end(), c)) == n) {
        CHECK(std::find(auc.skipped.begin(), auc.skipped.end(), order[c]) != auc.skipped.end());
        continue;
      }
      std::vector<double> s;
      std::vector<bool> pos;
      for (int i = 0; i < n; ++i) {
        s.push_back(probs[static_cast<std::size_t>(i * k + c)]);
        pos.push_back(truth[i] == c);
      }
      const double oracle = pairwise_auc(s, pos);
      const double got = auc.per_class.at(order[c]);
      worst_auc = std::max(worst_auc, std::abs(got - oracle));
      CHECK(std::abs(got - oracle) < 1e-9);
      sum += oracle;
      ++used;
    }
    CHECK(std::abs(auc.macro - sum / used) < 1e-9);
    CHECK((auc.macro >= 0.0 && auc.macro <= 1.0));
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  MESSAGE("worst AUC deviation " << worst_auc << ", " << secs << " s");
  CHECK(secs < 10.0);
}

TEST_CASE("metrics are invariant to sample order") {
  Rng rng(derive_seed(7, "perm"));
  const int n = 150, k = 5;
  const auto order = names(k);
  std::vector<int> truth(n);
  for (auto& t : truth) t = static_cast<int>(rng.below(k));
  const auto probs = random_probs(rng, n, k, true);
  const auto a = build_report(probs, truth, order);

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(std::span<std::size_t>(perm));
  nn::Tensor p2({n, k});
  std::vector<int> t2(n);
  for (int i = 0; i < n; ++i) {
    t2[i] = truth[perm[i]];
    for (int c = 0; c < k; ++c) p2[static_cast<std::size_t>(i * k + c)] = probs[perm[i] * k + c];
  }
  const auto b = build_report(p2, t2, order);
  CHECK(a.confusion.counts == b.confusion.counts);
  CHECK(a.macro.accuracy == b.macro.accuracy);
  CHECK(a.macro.macro_f1 == b.macro.macro_f1);
  CHECK(a.auc->macro == doctest::Approx(b.auc->macro).epsilon(1e-12));
  for (const auto& name : order) CHECK(a.auc->per_class.at(name) == b.auc->per_class.at(name));
}

TEST_CASE("report rendering writes six files with a consistent schema") {
  TempDir dir("metrics");
  Rng rng(derive_seed(11, "render"));
  const int n = 60, k = 7;
  const auto order = names(k);
  std::vector<int> truth(n);
  for (auto& t : truth) t = static_cast<int>(rng.below(k));
  classifier::TrainingHistory h;
  for (int e = 1; e <= 6; ++e) h.epochs.push_back({e, 1.5 / e, 0.4 + 0.08 * e, 1.6 / e, 0.35 + 0.07 * e});
  h.best_epoch = 6;
  const auto report = build_report(random_probs(rng, n, k, false), truth, order, h);
  const auto files = render_report(report, dir.path());
  REQUIRE(files.size() == 6);
  for (const char* f : {"metrics.json", "confusion_matrix.png", "accuracy_curve.png", "loss_curve.png",
                        "per_class_table.csv", "comparison_table.csv"})
    CHECK(std::filesystem::exists(dir / f));
  for (const char* f : {"confusion_matrix.png", "accuracy_curve.png", "loss_curve.png"}) {
    const cv::Mat img = cv::imread((dir / f).string());
    CHECK(img.cols == 1200);
    CHECK(img.rows == 900);
  }

  std::ifstream in(dir / "metrics.json");
  const auto j = nlohmann::json::parse(in);
  for (const char* key : {"schema_version", "class_order", "confusion", "per_class", "accuracy", "macro_precision",
                          "macro_recall", "macro_f1", "auc_ovr_macro", "degenerate_flags"})
    CHECK(j.contains(key));
  CHECK(j["class_order"].get<std::vector<std::string>>() == order);
  const auto counts = j["confusion"].get<std::vector<std::vector<long>>>();
  long trace = 0, total = 0;
  for (std::size_t i = 0; i < counts.size(); ++i)
    for (std::size_t c = 0; c < counts.size(); ++c) {
      total += counts[i][c];
      if (i == c) trace += counts[i][c];
    }
  CHECK(total == n);
  CHECK(std::abs(j["accuracy"].get<double>() - static_cast<double>(trace) / total) < 1e-12);
  double mean_p = 0.0;
  for (const auto& name : order) mean_p += j["per_class"][name]["precision"].get<double>();
  CHECK(std::abs(j["macro_precision"].get<double>() - mean_p / k) < 1e-12);

  std::ifstream cmp(dir / "comparison_table.csv");
  std::string text((std::istreambuf_iterator<char>(cmp)), std::istreambuf_iterator<char>());
  CHECK(text.rfind("study,model,accuracy,precision,recall,f1,auc,note\n", 0) == 0);
  CHECK(text.find("ResNet-50,91.71") != std::string::npos);
  CHECK(text.find("92.50,92.83,92.59,92.59,98.82") != std::string::npos);
  CHECK(text.find("This run") != std::string::npos);

  // Without a history the curves are still emitted.
  TempDir bare("metrics_bare");
  auto no_history = report;
  no_history.history.reset();
  CHECK(render_report(no_history, bare.path()).size() == 6);
}
