#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "skinlab/classifier.hpp"
#include "skinlab/nn/tensor.hpp"

namespace skinlab::metrics {

inline constexpr int kMetricsSchemaVersion = 1;

// Rows are true classes, columns predicted classes.
struct ConfusionMatrix {
  std::vector<std::string> class_order;
  std::vector<std::vector<long>> counts;

  long total() const;
  long trace() const;
  std::size_t size() const { return class_order.size(); }
};

ConfusionMatrix confusion_from_predictions(const std::vector<std::string>& truth,
                                           const std::vector<std::string>& predicted,
                                           const std::vector<std::string>& class_order);
ConfusionMatrix confusion_from_indices(const std::vector<int>& truth, const std::vector<int>& predicted,
                                       const std::vector<std::string>& class_order);

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  long tp = 0, fp = 0, fn = 0;
  long support = 0;
  // Set when a ratio was 0/0 and defined as 0.
  bool degenerate = false;
};

// Keyed by class name.
std::map<std::string, ClassMetrics> per_class_metrics(const ConfusionMatrix& cm);

struct MacroMetrics {
  double accuracy = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
};

MacroMetrics macro_metrics(const std::map<std::string, ClassMetrics>& per_class, const ConfusionMatrix& cm);

// Mann-Whitney AUC of scores against a binary indicator, ties credited 0.5.
double binary_auc(const std::vector<double>& scores, const std::vector<bool>& positive);

struct AucResult {
  double macro = 0.0;
  std::map<std::string, double> per_class;
  std::vector<std::string> skipped;  // classes without positives or negatives
};

// One-vs-rest over the columns of an N x K probability matrix. Throws
// DegenerateLabels when fewer than two classes occur among the labels.
AucResult auc_ovr(const nn::Tensor& probabilities, const std::vector<int>& labels,
                  const std::vector<std::string>& class_order);

struct MetricsReport {
  ConfusionMatrix confusion;
  std::map<std::string, ClassMetrics> per_class;
  MacroMetrics macro;
  std::optional<AucResult> auc;
  std::vector<std::string> degenerate_flags;
  std::optional<classifier::TrainingHistory> history;
};

// Predictions are the row-wise argmax of `probabilities`.
MetricsReport build_report(const nn::Tensor& probabilities, const std::vector<int>& labels,
                           const std::vector<std::string>& class_order,
                           std::optional<classifier::TrainingHistory> history = std::nullopt);

nlohmann::json to_json(const MetricsReport& r);

// Comparison-table row. Metrics are percentages; unknown cells stay empty.
struct ComparisonRow {
  std::string study;
  std::string model;
  std::optional<double> accuracy, precision, recall, f1, auc;
  std::string note;
};

// Fixed prior-study and published reference rows.
std::vector<ComparisonRow> reference_rows();
ComparisonRow run_row(const MetricsReport& r, const std::string& label = "This run");

// Writes metrics.json, confusion_matrix.png, accuracy_curve.png,
// loss_curve.png, per_class_table.csv and comparison_table.csv. Curves need a
// history; without one they are drawn empty with a note.
std::vector<std::filesystem::path> render_report(const MetricsReport& r, const std::filesystem::path& out_dir);

}  // namespace skinlab::metrics
