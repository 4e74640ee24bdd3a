#include "skinlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "skinlab/data.hpp"
#include "skinlab/error.hpp"

namespace fs = std::filesystem;

namespace skinlab::metrics {

namespace {

constexpr int kFigW = 1200, kFigH = 900;

double ratio(long num, long den, bool& degenerate) {
  if (den == 0) {
    degenerate = true;
    return 0.0;
  }
  return static_cast<double>(num) / static_cast<double>(den);
}

std::string fmt(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
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

void write_png(const fs::path& path, const cv::Mat& bgr) {
  if (!cv::imwrite(path.string(), bgr)) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
}

void centered_text(cv::Mat& img, const std::string& text, cv::Point center, double scale, cv::Scalar color,
                   int thickness = 1) {
  int baseline = 0;
  const cv::Size sz = cv::getTextSize(text, cv::FONT_HERSHEY_SIMPLEX, scale, thickness, &baseline);
  cv::putText(img, text, {center.x - sz.width / 2, center.y + sz.height / 2}, cv::FONT_HERSHEY_SIMPLEX, scale, color,
              thickness, cv::LINE_AA);
}

std::string shorten(const std::string& s, std::size_t n) { return s.size() <= n ? s : s.substr(0, n - 2) + ".."; }

struct Series {
  std::string name;
  std::vector<double> x, y;
  cv::Scalar color;
};

cv::Mat line_chart(const std::string& title, const std::string& ylabel, const std::vector<Series>& series,
                   const std::string& empty_note) {
  cv::Mat img(kFigH, kFigW, CV_8UC3, cv::Scalar(255, 255, 255));
  const cv::Rect plot(120, 90, 1020, 700);
  centered_text(img, title, {kFigW / 2, 40}, 1.0, {0, 0, 0}, 2);
  centered_text(img, "Epoch", {plot.x + plot.width / 2, plot.br().y + 65}, 0.8, {0, 0, 0});
  cv::Mat ylab(40, 300, CV_8UC3, cv::Scalar(255, 255, 255));
  centered_text(ylab, ylabel, {150, 20}, 0.8, {0, 0, 0});
  cv::rotate(ylab, ylab, cv::ROTATE_90_COUNTERCLOCKWISE);
  ylab.copyTo(img(cv::Rect(15, plot.y + plot.height / 2 - 150, 40, 300)));
  cv::rectangle(img, plot, {0, 0, 0}, 1);

  double xmin = 1, xmax = 1, ymin = 0, ymax = 1;
  bool any = false;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      if (!any) {
        xmin = xmax = s.x[i];
        ymin = ymax = s.y[i];
        any = true;
      }
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  if (!any) {
    centered_text(img, empty_note, {plot.x + plot.width / 2, plot.y + plot.height / 2}, 0.9, {90, 90, 90});
    return img;
  }
  if (xmax == xmin) xmax = xmin + 1;
  const double pad = std::max(1e-6, (ymax - ymin) * 0.08);
  ymin -= pad;
  ymax += pad;
  auto px = [&](double x, double y) {
    return cv::Point(plot.x + static_cast<int>(std::lround((x - xmin) / (xmax - xmin) * plot.width)),
                     plot.br().y - static_cast<int>(std::lround((y - ymin) / (ymax - ymin) * plot.height)));
  };
  for (int t = 0; t <= 5; ++t) {
    const double y = ymin + (ymax - ymin) * t / 5.0;
    const cv::Point p = px(xmin, y);
    cv::line(img, {plot.x, p.y}, {plot.br().x, p.y}, {225, 225, 225}, 1);
    cv::putText(img, fmt(y, 3), {plot.x - 95, p.y + 6}, cv::FONT_HERSHEY_SIMPLEX, 0.55, {0, 0, 0}, 1, cv::LINE_AA);
  }
  // Whole-epoch ticks, at most about ten of them.
  const double step = std::max(1.0, std::ceil((xmax - xmin) / 10.0));
  for (double x = std::ceil(xmin); x <= xmax + 1e-9; x += step) {
    const cv::Point p = px(x, ymin);
    cv::line(img, {p.x, plot.br().y}, {p.x, plot.br().y + 6}, {0, 0, 0}, 1);
    centered_text(img, fmt(x, 0), {p.x, plot.br().y + 22}, 0.55, {0, 0, 0});
  }
  int legend_y = plot.y + 25;
  for (const auto& s : series) {
    std::vector<cv::Point> pts;
    for (std::size_t i = 0; i < s.x.size(); ++i)
      if (std::isfinite(s.y[i])) pts.push_back(px(s.x[i], s.y[i]));
    if (pts.size() > 1) cv::polylines(img, pts, false, s.color, 3, cv::LINE_AA);
    for (const auto& p : pts) cv::circle(img, p, 5, s.color, cv::FILLED, cv::LINE_AA);
    cv::line(img, {plot.br().x - 260, legend_y}, {plot.br().x - 210, legend_y}, s.color, 3, cv::LINE_AA);
    cv::putText(img, s.name, {plot.br().x - 200, legend_y + 7}, cv::FONT_HERSHEY_SIMPLEX, 0.7, {0, 0, 0}, 1,
                cv::LINE_AA);
    legend_y += 32;
  }
  return img;
}

cv::Mat confusion_figure(const ConfusionMatrix& cm) {
  cv::Mat img(kFigH, kFigW, CV_8UC3, cv::Scalar(255, 255, 255));
  centered_text(img, "Confusion Matrix", {kFigW / 2, 40}, 1.0, {0, 0, 0}, 2);
  const int k = static_cast<int>(cm.size());
  const int side = 610;
  const cv::Rect grid(330, 95, side, side);
  long vmax = 1;
  for (const auto& row : cm.counts)
    for (long v : row) vmax = std::max(vmax, v);
  const double cell = static_cast<double>(side) / std::max(1, k);
  const double font = std::clamp(cell / 110.0, 0.35, 1.0);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      const double t = static_cast<double>(cm.counts[i][j]) / static_cast<double>(vmax);
      // White to dark blue (BGR).
      const cv::Scalar color(255 - 75 * t, 255 - 200 * t, 255 - 247 * t);
      const cv::Rect r(grid.x + static_cast<int>(j * cell), grid.y + static_cast<int>(i * cell),
                       static_cast<int>(cell) + 1, static_cast<int>(cell) + 1);
      cv::rectangle(img, r, color, cv::FILLED);
      cv::rectangle(img, r, {200, 200, 200}, 1);
      centered_text(img, std::to_string(cm.counts[i][j]), {r.x + r.width / 2, r.y + r.height / 2}, font,
                    t > 0.5 ? cv::Scalar(255, 255, 255) : cv::Scalar(0, 0, 0), font > 0.6 ? 2 : 1);
    }
  for (int i = 0; i < k; ++i) {
    const int c = static_cast<int>((i + 0.5) * cell);
    const std::string name = shorten(cm.class_order[static_cast<std::size_t>(i)], 16);
    int baseline = 0;
    const auto sz = cv::getTextSize(name, cv::FONT_HERSHEY_SIMPLEX, 0.55, 1, &baseline);
    cv::putText(img, name, {grid.x - sz.width - 10, grid.y + c + 6}, cv::FONT_HERSHEY_SIMPLEX, 0.55, {0, 0, 0}, 1,
                cv::LINE_AA);
    cv::Mat lab(30, 150, CV_8UC3, cv::Scalar(255, 255, 255));
    centered_text(lab, name, {75, 15}, 0.55, {0, 0, 0});
    cv::rotate(lab, lab, cv::ROTATE_90_COUNTERCLOCKWISE);
    lab.copyTo(img(cv::Rect(grid.x + c - 15, grid.br().y + 5, 30, 150)));
  }
  centered_text(img, "Predicted label", {grid.x + side / 2, kFigH - 12}, 0.75, {0, 0, 0});
  cv::Mat ylab(36, 300, CV_8UC3, cv::Scalar(255, 255, 255));
  centered_text(ylab, "True label", {150, 18}, 0.75, {0, 0, 0});
  cv::rotate(ylab, ylab, cv::ROTATE_90_COUNTERCLOCKWISE);
  ylab.copyTo(img(cv::Rect(20, grid.y + side / 2 - 150, 36, 300)));
  return img;
}

std::string opt_cell(const std::optional<double>& v) { return v ? fmt(*v, 2) : ""; }

}  // namespace

long ConfusionMatrix::total() const {
  long t = 0;
  for (const auto& row : counts) t += std::accumulate(row.begin(), row.end(), 0L);
  return t;
}

long ConfusionMatrix::trace() const {
  long t = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) t += counts[i][i];
  return t;
}

ConfusionMatrix confusion_from_indices(const std::vector<int>& truth, const std::vector<int>& predicted,
                                       const std::vector<std::string>& class_order) {
  if (truth.size() != predicted.size())
    throw Error(ErrorCode::ShapeMismatch, "truth and prediction lengths differ");
  const auto k = class_order.size();
  ConfusionMatrix cm{class_order, std::vector<std::vector<long>>(k, std::vector<long>(k, 0))};
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int t = truth[i], p = predicted[i];
    if (t < 0 || p < 0 || static_cast<std::size_t>(t) >= k || static_cast<std::size_t>(p) >= k)
      throw Error(ErrorCode::UnknownLabel, "label index out of range at sample " + std::to_string(i));
    ++cm.counts[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)];
  }
  return cm;
}

ConfusionMatrix confusion_from_predictions(const std::vector<std::string>& truth,
                                           const std::vector<std::string>& predicted,
                                           const std::vector<std::string>& class_order) {
  std::map<std::string, int> index;
  for (std::size_t i = 0; i < class_order.size(); ++i) index[class_order[i]] = static_cast<int>(i);
  auto lookup = [&](const std::string& s) {
    auto it = index.find(s);
    if (it == index.end()) throw Error(ErrorCode::UnknownLabel, "label not in class order: " + s);
    return it->second;
  };
  if (truth.size() != predicted.size())
    throw Error(ErrorCode::ShapeMismatch, "truth and prediction lengths differ");
  std::vector<int> t, p;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    t.push_back(lookup(truth[i]));
    p.push_back(lookup(predicted[i]));
  }
  return confusion_from_indices(t, p, class_order);
}

std::map<std::string, ClassMetrics> per_class_metrics(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw Error(ErrorCode::EmptyMatrix, "confusion matrix has no samples");
  const auto k = cm.size();
  std::map<std::string, ClassMetrics> out;
  for (std::size_t c = 0; c < k; ++c) {
    ClassMetrics m;
    m.tp = cm.counts[c][c];
    for (std::size_t o = 0; o < k; ++o) {
      if (o == c) continue;
      m.fp += cm.counts[o][c];
      m.fn += cm.counts[c][o];
    }
    m.support = m.tp + m.fn;
    m.precision = ratio(m.tp, m.tp + m.fp, m.degenerate);
    m.recall = ratio(m.tp, m.tp + m.fn, m.degenerate);
    m.f1 = m.precision + m.recall > 0 ? 2 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    out[cm.class_order[c]] = m;
  }
  return out;
}

MacroMetrics macro_metrics(const std::map<std::string, ClassMetrics>& per_class, const ConfusionMatrix& cm) {
  MacroMetrics m;
  const long total = cm.total();
  m.accuracy = total > 0 ? static_cast<double>(cm.trace()) / static_cast<double>(total) : 0.0;
  if (per_class.empty()) return m;
  for (const auto& [name, c] : per_class) {
    m.macro_precision += c.precision;
    m.macro_recall += c.recall;
    m.macro_f1 += c.f1;
  }
  const auto n = static_cast<double>(per_class.size());
  m.macro_precision /= n;
  m.macro_recall /= n;
  m.macro_f1 /= n;
  return m;
}

double binary_auc(const std::vector<double>& scores, const std::vector<bool>& positive) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Average ranks over tied runs, 1-based.
  double rank_sum = 0.0;
  long n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t t = i; t <= j; ++t)
      if (positive[order[t]]) {
        rank_sum += avg;
        ++n_pos;
      }
    i = j + 1;
  }
  const long n_neg = static_cast<long>(n) - n_pos;
  if (n_pos == 0 || n_neg == 0) throw Error(ErrorCode::DegenerateLabels, "AUC needs both positives and negatives");
  const double u = rank_sum - static_cast<double>(n_pos) * static_cast<double>(n_pos + 1) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

AucResult auc_ovr(const nn::Tensor& probabilities, const std::vector<int>& labels,
                  const std::vector<std::string>& class_order) {
  const int k = static_cast<int>(class_order.size());
  if (probabilities.rank() != 2 || probabilities.dim(1) != k ||
      static_cast<std::size_t>(probabilities.dim(0)) != labels.size())
    throw Error(ErrorCode::ShapeMismatch, "probabilities must be N x K with one label per row");
  std::vector<long> present(static_cast<std::size_t>(k), 0);
  for (int y : labels) {
    if (y < 0 || y >= k) throw Error(ErrorCode::UnknownLabel, "label index out of range");
    ++present[static_cast<std::size_t>(y)];
  }
  if (std::count_if(present.begin(), present.end(), [](long c) { return c > 0; }) < 2)
    throw Error(ErrorCode::DegenerateLabels, "fewer than two classes among the labels");
  AucResult out;
  const std::size_t n = labels.size();
  double sum = 0.0;
  for (int c = 0; c < k; ++c) {
    const auto& name = class_order[static_cast<std::size_t>(c)];
    if (present[static_cast<std::size_t>(c)] == 0 || present[static_cast<std::size_t>(c)] == static_cast<long>(n)) {
      out.skipped.push_back(name);
      continue;
    }
    std::vector<double> scores(n);
    std::vector<bool> pos(n);
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = probabilities[i * static_cast<std::size_t>(k) + static_cast<std::size_t>(c)];
      pos[i] = labels[i] == c;
    }
    out.per_class[name] = binary_auc(scores, pos);
    sum += out.per_class[name];
  }
  out.macro = sum / static_cast<double>(out.per_class.size());
  return out;
}

MetricsReport build_report(const nn::Tensor& probabilities, const std::vector<int>& labels,
                           const std::vector<std::string>& class_order,
                           std::optional<classifier::TrainingHistory> history) {
  const int k = static_cast<int>(class_order.size());
  if (probabilities.rank() != 2 || probabilities.dim(1) != k ||
      static_cast<std::size_t>(probabilities.dim(0)) != labels.size())
    throw Error(ErrorCode::ShapeMismatch, "probabilities must be N x K with one label per row");
  std::vector<int> predicted;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const float* row = probabilities.data() + i * static_cast<std::size_t>(k);
    predicted.push_back(static_cast<int>(std::max_element(row, row + k) - row));
  }
  MetricsReport r;
  r.confusion = confusion_from_indices(labels, predicted, class_order);
  r.per_class = per_class_metrics(r.confusion);
  r.macro = macro_metrics(r.per_class, r.confusion);
  for (const auto& name : class_order)
    if (r.per_class.at(name).degenerate) r.degenerate_flags.push_back("zero_denominator:" + name);
  try {
    r.auc = auc_ovr(probabilities, labels, class_order);
    for (const auto& s : r.auc->skipped) r.degenerate_flags.push_back("auc_skipped:" + s);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::DegenerateLabels) throw;
    r.degenerate_flags.push_back("auc_undefined");
  }
  r.history = std::move(history);
  return r;
}

nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json per_class = nlohmann::json::object();
  for (const auto& [name, m] : r.per_class)
    per_class[name] = {{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}, {"support", m.support}};
  nlohmann::json j = {{"schema_version", kMetricsSchemaVersion},
                      {"class_order", r.confusion.class_order},
                      {"confusion", r.confusion.counts},
                      {"per_class", per_class},
                      {"accuracy", r.macro.accuracy},
                      {"macro_precision", r.macro.macro_precision},
                      {"macro_recall", r.macro.macro_recall},
                      {"macro_f1", r.macro.macro_f1},
                      {"auc_ovr_macro", r.auc ? nlohmann::json(r.auc->macro) : nlohmann::json()},
                      {"averaging", "macro (unweighted mean over classes)"},
                      {"degenerate_flags", r.degenerate_flags}};
  if (r.auc) j["auc_ovr_per_class"] = r.auc->per_class;
  if (r.history) j["history"] = classifier::to_json(*r.history);
  return j;
}

std::vector<ComparisonRow> reference_rows() {
  return {
      {"Prior study (SGD, 150 epochs)", "ResNet-50", 91.71, {}, {}, {}, {}, "accuracy only reported"},
      {"Prior study 2", "ResNet-50", 82.00, {}, {}, {}, {}, "accuracy only reported"},
      {"Prior studies", "NASNetLarge", {}, {}, {}, {}, {}, "accuracy up to 91%"},
      {"Prior studies", "InceptionV3", {}, {}, {}, {}, {}, "accuracy up to 91%"},
      {"Published reference (full scale)", "DCGAN-balanced ResNet-50", 92.50, 92.83, 92.59, 92.59, 98.82,
       "macro averages"},
  };
}

ComparisonRow run_row(const MetricsReport& r, const std::string& label) {
  ComparisonRow row{label,
                    "DCGAN-balanced classifier",
                    100.0 * r.macro.accuracy,
                    100.0 * r.macro.macro_precision,
                    100.0 * r.macro.macro_recall,
                    100.0 * r.macro.macro_f1,
                    {},
                    "macro averages"};
  if (r.auc) row.auc = 100.0 * r.auc->macro;
  return row;
}

std::vector<fs::path> render_report(const MetricsReport& r, const fs::path& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw Error(ErrorCode::IoFailure, "cannot create " + out_dir.string() + ": " + ec.message());
  std::vector<fs::path> written;

  const fs::path json_path = out_dir / "metrics.json";
  write_text(json_path, to_json(r).dump(2) + "\n");
  written.push_back(json_path);

  const fs::path cm_path = out_dir / "confusion_matrix.png";
  write_png(cm_path, confusion_figure(r.confusion));
  written.push_back(cm_path);

  std::vector<double> ep, tr_acc, va_acc, tr_loss, va_loss;
  if (r.history)
    for (const auto& e : r.history->epochs) {
      ep.push_back(e.epoch);
      tr_acc.push_back(e.train_acc);
      va_acc.push_back(e.val_acc);
      tr_loss.push_back(e.train_loss);
      va_loss.push_back(e.val_loss);
    }
  const cv::Scalar blue(180, 119, 31), orange(14, 127, 255);
  const fs::path acc_path = out_dir / "accuracy_curve.png";
  write_png(acc_path, line_chart("Training and Validation Accuracy", "Accuracy",
                                 {{"Training", ep, tr_acc, blue}, {"Validation", ep, va_acc, orange}},
                                 "no training history available"));
  written.push_back(acc_path);
  const fs::path loss_path = out_dir / "loss_curve.png";
  write_png(loss_path, line_chart("Training and Validation Loss", "Loss",
                                  {{"Training", ep, tr_loss, blue}, {"Validation", ep, va_loss, orange}},
                                  "no training history available"));
  written.push_back(loss_path);

  std::ostringstream pc;
  pc << "class,precision,recall,f1,support,degenerate\n";
  for (const auto& name : r.confusion.class_order) {
    const auto& m = r.per_class.at(name);
    pc << data::csv_escape(name) << ',' << fmt(m.precision, 4) << ',' << fmt(m.recall, 4) << ',' << fmt(m.f1, 4) << ','
       << m.support << ',' << (m.degenerate ? "true" : "false") << '\n';
  }
  pc << "macro," << fmt(r.macro.macro_precision, 4) << ',' << fmt(r.macro.macro_recall, 4) << ','
     << fmt(r.macro.macro_f1, 4) << ',' << r.confusion.total() << ",\n";
  const fs::path pc_path = out_dir / "per_class_table.csv";
  write_text(pc_path, pc.str());
  written.push_back(pc_path);

  std::ostringstream cmp;
  cmp << "study,model,accuracy,precision,recall,f1,auc,note\n";
  auto rows = reference_rows();
  rows.push_back(run_row(r));
  for (const auto& row : rows)
    cmp << data::csv_escape(row.study) << ',' << data::csv_escape(row.model) << ',' << opt_cell(row.accuracy) << ','
        << opt_cell(row.precision) << ',' << opt_cell(row.recall) << ',' << opt_cell(row.f1) << ','
        << opt_cell(row.auc) << ',' << data::csv_escape(row.note) << '\n';
  const fs::path cmp_path = out_dir / "comparison_table.csv";
  write_text(cmp_path, cmp.str());
  written.push_back(cmp_path);
  return written;
}

}  // namespace skinlab::metrics
