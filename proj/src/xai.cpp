#include "skinlab/xai.hpp"

#include <algorithm>
#include <cmath>
#include <bit>
#include <limits>
#include <map>
#include <numeric>

#include <Eigen/Dense>

#include "skinlab/error.hpp"
#include "skinlab/rng.hpp"

namespace skinlab::xai {

namespace {

using Mask = std::vector<std::uint8_t>;

PixelArray unit_copy(const PixelArray& img) {
  if (img.range() == RangeTag::Unit) return img;
  if (img.range() == RangeTag::Byte) return to_unit(img);
  throw Error(ErrorCode::RangeTagMismatch, "explanations need a unit or byte range image, got " +
                                               std::string(to_string(img.range())));
}

void check_shapes(const PixelArray& img, const SuperpixelMap& seg) {
  if (img.height() != seg.height || img.width() != seg.width)
    throw Error(ErrorCode::ShapeMismatch, "segmentation " + std::to_string(seg.height) + "x" +
                                              std::to_string(seg.width) + " does not match image " +
                                              std::to_string(img.height()) + "x" + std::to_string(img.width()));
}

double srgb_to_linear(double c) { return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4); }

double lab_f(double t) {
  constexpr double d = 6.0 / 29.0;
  return t > d * d * d ? std::cbrt(t) : t / (3 * d * d) + 4.0 / 29.0;
}

// D65 CIELAB, three planes.
std::vector<double> to_lab(const PixelArray& img) {
  const std::size_t n = img.plane_size();
  std::vector<double> lab(3 * n);
  const auto r = img.plane(0), g = img.plane(1), b = img.plane(2);
  for (std::size_t i = 0; i < n; ++i) {
    const double lr = srgb_to_linear(std::clamp<double>(r[i], 0, 1));
    const double lg = srgb_to_linear(std::clamp<double>(g[i], 0, 1));
    const double lb = srgb_to_linear(std::clamp<double>(b[i], 0, 1));
    const double x = (0.4124564 * lr + 0.3575761 * lg + 0.1804375 * lb) / 0.95047;
    const double y = 0.2126729 * lr + 0.7151522 * lg + 0.0721750 * lb;
    const double z = (0.0193339 * lr + 0.1191920 * lg + 0.9503041 * lb) / 1.08883;
    const double fx = lab_f(x), fy = lab_f(y), fz = lab_f(z);
    lab[i] = 116 * fy - 16;
    lab[n + i] = 500 * (fx - fy);
    lab[2 * n + i] = 200 * (fy - fz);
  }
  return lab;
}

struct Centre {
  double l, a, b, x, y;
};

std::vector<double> evaluate(const MaskModel& model, const std::vector<Mask>& masks) {
  auto values = model(masks);
  if (values.size() != masks.size())
    throw Error(ErrorCode::ModelCallFailure, "model returned " + std::to_string(values.size()) + " values for " +
                                                 std::to_string(masks.size()) + " masks");
  for (double v : values)
    if (!std::isfinite(v)) throw Error(ErrorCode::ModelCallFailure, "model returned a non-finite value");
  return values;
}

Mask bits_to_mask(std::uint64_t bits, int s) {
  Mask m(static_cast<std::size_t>(s));
  for (int i = 0; i < s; ++i) m[static_cast<std::size_t>(i)] = (bits >> i) & 1U;
  return m;
}

void blend(const PixelArray& base, int y, int x, const float tint[3], float w, PixelArray& out) {
  for (int c = 0; c < 3; ++c) out.at(c, y, x) = (1.0f - w) * base.at(c, y, x) + w * tint[c];
}

}  // namespace

SuperpixelMap segment_superpixels(const PixelArray& input, const SlicConfig& config) {
  const PixelArray img = unit_copy(input);
  const int h = img.height(), w = img.width();
  const long n = static_cast<long>(h) * w;
  const int k = config.target_segments;
  if (k < 1 || k > n)
    throw Error(ErrorCode::BadTarget, "target of " + std::to_string(k) + " segments for " + std::to_string(n) +
                                          " pixels");
  const auto lab = to_lab(img);
  const auto L = [&](int y, int x, int c) { return lab[static_cast<std::size_t>(c) * n + y * w + x]; };

  // Grid shaped to the aspect ratio so small targets still split both ways.
  const int ny = std::clamp(static_cast<int>(std::lround(std::sqrt(static_cast<double>(k) * h / w))), 1, h);
  const int nx = std::clamp(static_cast<int>(std::lround(static_cast<double>(k) / ny)), 1, w);
  const double cell_x = static_cast<double>(w) / nx, cell_y = static_cast<double>(h) / ny;
  const double step = std::sqrt(static_cast<double>(n) / (nx * ny));

  auto gradient = [&](int y, int x) {
    if (x < 1 || y < 1 || x >= w - 1 || y >= h - 1) return std::numeric_limits<double>::infinity();
    double g = 0;
    for (int c = 0; c < 3; ++c) {
      const double dx = L(y, x + 1, c) - L(y, x - 1, c), dy = L(y + 1, x, c) - L(y - 1, x, c);
      g += dx * dx + dy * dy;
    }
    return g;
  };

  std::vector<Centre> centres;
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) {
      // Exact cell centre, so a featureless image splits into equal cells.
      const double fx = (i + 0.5) * cell_x - 0.5, fy = (j + 0.5) * cell_y - 0.5;
      const int cx = std::clamp(static_cast<int>(std::lround(fx)), 0, w - 1);
      const int cy = std::clamp(static_cast<int>(std::lround(fy)), 0, h - 1);
      // Move off edges to the lowest gradient in the 3x3 neighbourhood.
      double best = gradient(cy, cx);
      int bx = cx, by = cy;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const double g = gradient(cy + dy, cx + dx);
          if (g < best) {
            best = g;
            bx = cx + dx;
            by = cy + dy;
          }
        }
      const bool moved = bx != cx || by != cy;
      centres.push_back({L(by, bx, 0), L(by, bx, 1), L(by, bx, 2), moved ? bx : fx, moved ? by : fy});
    }

  const double spatial = (config.compactness / step) * (config.compactness / step);
  const int rx = static_cast<int>(std::ceil(cell_x)), ry = static_cast<int>(std::ceil(cell_y));
  std::vector<int> assign(static_cast<std::size_t>(n), -1);
  std::vector<double> dist(static_cast<std::size_t>(n));
  auto distance = [&](const Centre& c, int y, int x) {
    const double dl = L(y, x, 0) - c.l, da = L(y, x, 1) - c.a, db = L(y, x, 2) - c.b;
    const double px = x - c.x, py = y - c.y;
    return dl * dl + da * da + db * db + spatial * (px * px + py * py);
  };
  for (int it = 0; it < std::max(1, config.iterations); ++it) {
    std::fill(dist.begin(), dist.end(), std::numeric_limits<double>::infinity());
    std::fill(assign.begin(), assign.end(), -1);
    for (std::size_t ci = 0; ci < centres.size(); ++ci) {
      const auto& c = centres[ci];
      const int x0 = std::max(0, static_cast<int>(c.x) - rx), x1 = std::min(w - 1, static_cast<int>(c.x) + rx);
      const int y0 = std::max(0, static_cast<int>(c.y) - ry), y1 = std::min(h - 1, static_cast<int>(c.y) + ry);
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          const double d = distance(c, y, x);
          const std::size_t p = static_cast<std::size_t>(y) * w + x;
          if (d < dist[p]) {
            dist[p] = d;
            assign[p] = static_cast<int>(ci);
          }
        }
    }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t p = static_cast<std::size_t>(y) * w + x;
        if (assign[p] >= 0) continue;
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t ci = 0; ci < centres.size(); ++ci) {
          const double d = distance(centres[ci], y, x);
          if (d < best) {
            best = d;
            assign[p] = static_cast<int>(ci);
          }
        }
      }
    std::vector<Centre> sums(centres.size(), Centre{0, 0, 0, 0, 0});
    std::vector<long> counts(centres.size(), 0);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const auto ci = static_cast<std::size_t>(assign[static_cast<std::size_t>(y) * w + x]);
        sums[ci].l += L(y, x, 0);
        sums[ci].a += L(y, x, 1);
        sums[ci].b += L(y, x, 2);
        sums[ci].x += x;
        sums[ci].y += y;
        ++counts[ci];
      }
    for (std::size_t ci = 0; ci < centres.size(); ++ci) {
      if (counts[ci] == 0) continue;
      const double m = static_cast<double>(counts[ci]);
      centres[ci] = {sums[ci].l / m, sums[ci].a / m, sums[ci].b / m, sums[ci].x / m, sums[ci].y / m};
    }
  }

  // Connected components; fragments below a quarter of the mean segment size
  // join the labelled neighbour of their first pixel.
  SuperpixelMap out{h, w, 0, std::vector<int>(static_cast<std::size_t>(n), -1)};
  const long min_size = std::max(1L, n / (static_cast<long>(centres.size()) * 4));
  const int dx4[4] = {1, -1, 0, 0}, dy4[4] = {0, 0, 1, -1};
  std::vector<std::size_t> component;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t start = static_cast<std::size_t>(y) * w + x;
      if (out.labels[start] >= 0) continue;
      int adjacent = -1;
      for (int d = 0; d < 4; ++d) {
        const int ax = x + dx4[d], ay = y + dy4[d];
        if (ax < 0 || ay < 0 || ax >= w || ay >= h) continue;
        const int l = out.labels[static_cast<std::size_t>(ay) * w + ax];
        if (l >= 0) {
          adjacent = l;
          break;
        }
      }
      const int label = out.count;
      component.assign(1, start);
      out.labels[start] = label;
      for (std::size_t head = 0; head < component.size(); ++head) {
        const int py = static_cast<int>(component[head] / w), px = static_cast<int>(component[head] % w);
        for (int d = 0; d < 4; ++d) {
          const int qx = px + dx4[d], qy = py + dy4[d];
          if (qx < 0 || qy < 0 || qx >= w || qy >= h) continue;
          const std::size_t q = static_cast<std::size_t>(qy) * w + qx;
          if (out.labels[q] >= 0 || assign[q] != assign[start]) continue;
          out.labels[q] = label;
          component.push_back(q);
        }
      }
      if (static_cast<long>(component.size()) < min_size && adjacent >= 0) {
        for (auto p : component) out.labels[p] = adjacent;
      } else {
        ++out.count;
      }
    }
  return out;
}

PixelArray apply_mask(const PixelArray& input, const SuperpixelMap& seg, const Mask& mask) {
  const PixelArray img = unit_copy(input);
  check_shapes(img, seg);
  if (static_cast<int>(mask.size()) != seg.count)
    throw Error(ErrorCode::ShapeMismatch, "mask has " + std::to_string(mask.size()) + " entries for " +
                                              std::to_string(seg.count) + " segments");
  PixelArray out = img;
  for (int c = 0; c < 3; ++c) {
    const auto plane = img.plane(c);
    const double mean = std::accumulate(plane.begin(), plane.end(), 0.0) / static_cast<double>(plane.size());
    auto dst = out.plane(c);
    for (std::size_t p = 0; p < dst.size(); ++p)
      if (!mask[static_cast<std::size_t>(seg.labels[p])]) dst[p] = static_cast<float>(mean);
  }
  return out;
}

MaskModel image_mask_model(const BatchPredictor& predict, const PixelArray& input, const SuperpixelMap& seg,
                           int class_index, int batch_size) {
  PixelArray img = unit_copy(input);
  check_shapes(img, seg);
  if (batch_size < 1) throw Error(ErrorCode::BadSpec, "batch size must be positive");
  return [predict, img = std::move(img), seg, class_index, batch_size](const std::vector<Mask>& masks) {
    std::vector<double> values;
    values.reserve(masks.size());
    for (std::size_t first = 0; first < masks.size(); first += static_cast<std::size_t>(batch_size)) {
      const std::size_t last = std::min(masks.size(), first + static_cast<std::size_t>(batch_size));
      std::vector<PixelArray> batch;
      for (std::size_t i = first; i < last; ++i) batch.push_back(apply_mask(img, seg, masks[i]));
      nn::Tensor probs;
      try {
        probs = predict(batch);
      } catch (const Error& e) {
        if (e.code() == ErrorCode::ModelCallFailure) throw;
        throw Error(ErrorCode::ModelCallFailure, e.what());
      } catch (const std::exception& e) {
        throw Error(ErrorCode::ModelCallFailure, e.what());
      }
      if (probs.rank() != 2 || static_cast<std::size_t>(probs.dim(0)) != batch.size() || class_index < 0 ||
          class_index >= probs.dim(1))
        throw Error(ErrorCode::ModelCallFailure, "predictor output does not match the batch or class index");
      for (std::size_t r = 0; r < batch.size(); ++r)
        values.push_back(probs[r * static_cast<std::size_t>(probs.dim(1)) + static_cast<std::size_t>(class_index)]);
    }
    return values;
  };
}

double lime_kernel(const Mask& mask, double kernel_width) {
  const double kept = static_cast<double>(std::count(mask.begin(), mask.end(), 1));
  // Cosine distance to all-ones; an empty mask is orthogonal by definition.
  const double d = kept == 0 ? 1.0 : 1.0 - std::sqrt(kept / static_cast<double>(mask.size()));
  return std::exp(-d * d / (kernel_width * kernel_width));
}

LimeExplanation lime_from_masks(const MaskModel& model, int segments, const LimeConfig& config) {
  if (segments < 1) throw Error(ErrorCode::BadSpec, "LIME needs at least one segment");
  if (config.kernel_width <= 0 || config.ridge_lambda < 0 || config.top_k < 0)
    throw Error(ErrorCode::BadSpec, "invalid LIME configuration");
  std::vector<Mask> masks;
  masks.emplace_back(static_cast<std::size_t>(segments), 1);
  if (config.exhaustive) {
    if (segments > 16) throw Error(ErrorCode::BadSpec, "exhaustive LIME is limited to 16 segments");
    const std::uint64_t full = (1ULL << segments) - 1;
    for (std::uint64_t bits = 0; bits < full; ++bits) masks.push_back(bits_to_mask(bits, segments));
  } else {
    if (config.n_samples < 2) throw Error(ErrorCode::BadSpec, "LIME needs at least two samples");
    for (int i = 1; i < config.n_samples; ++i) {
      Rng rng(derive_seed(config.seed, "lime", static_cast<std::uint64_t>(i)));
      Mask m(static_cast<std::size_t>(segments));
      for (auto& b : m) b = rng.uniform() < 0.5 ? 1 : 0;
      masks.push_back(std::move(m));
    }
  }
  const auto y = evaluate(model, masks);

  const Eigen::Index n = static_cast<Eigen::Index>(masks.size()), s = segments;
  Eigen::MatrixXd x(n, s);
  Eigen::VectorXd yv(n), wv(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < s; ++j) x(i, j) = masks[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    yv(i) = y[static_cast<std::size_t>(i)];
    wv(i) = lime_kernel(masks[static_cast<std::size_t>(i)], config.kernel_width);
  }
  const double wsum = wv.sum();
  const Eigen::RowVectorXd xbar = (wv.transpose() * x) / wsum;
  const double ybar = wv.dot(yv) / wsum;
  const Eigen::MatrixXd xc = x.rowwise() - xbar;
  const Eigen::VectorXd yc = yv.array() - ybar;
  const Eigen::MatrixXd gram = xc.transpose() * wv.asDiagonal() * xc;
  const Eigen::VectorXd rhs = xc.transpose() * (wv.asDiagonal() * yc);

  LimeExplanation out;
  double lambda = config.ridge_lambda;
  Eigen::VectorXd beta;
  for (int attempt = 0;; ++attempt) {
    Eigen::MatrixXd a = gram;
    a.diagonal().array() += lambda;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(a);
    const auto d = ldlt.vectorD();
    bool ok = ldlt.info() == Eigen::Success && d.minCoeff() > 1e-12 * std::max(1.0, d.maxCoeff());
    if (ok) {
      beta = ldlt.solve(rhs);
      ok = beta.allFinite();
    }
    if (ok) break;
    if (attempt == 8) throw Error(ErrorCode::SingularFit, "ridge system stayed singular up to lambda " +
                                                              std::to_string(lambda));
    lambda = std::max(lambda * 10.0, 1e-6);
    out.warnings.push_back("singular fit; lambda raised to " + std::to_string(lambda));
  }
  out.lambda_used = lambda;
  out.weights.assign(beta.data(), beta.data() + beta.size());
  out.intercept = ybar - xbar.dot(beta);

  const Eigen::VectorXd resid = yc - xc * beta;
  const double ss_res = (wv.array() * resid.array().square()).sum();
  const double ss_tot = (wv.array() * yc.array().square()).sum();
  out.fit_r2 = ss_tot <= 1e-300 ? 1.0 : std::clamp(1.0 - ss_res / ss_tot, 0.0, 1.0);

  std::vector<int> positive;
  for (int j = 0; j < segments; ++j)
    if (out.weights[static_cast<std::size_t>(j)] > 0) positive.push_back(j);
  std::stable_sort(positive.begin(), positive.end(),
                   [&](int a, int b) { return out.weights[static_cast<std::size_t>(a)] > out.weights[static_cast<std::size_t>(b)]; });
  if (static_cast<int>(positive.size()) > config.top_k) positive.resize(static_cast<std::size_t>(config.top_k));
  out.top_segments = std::move(positive);
  return out;
}

ShapExplanation shap_exact(const MaskModel& model, int segments) {
  if (segments < 1 || segments > 20) throw Error(ErrorCode::BadSpec, "exact Shapley values need 1..20 segments");
  const std::uint64_t subsets = 1ULL << segments;
  std::vector<Mask> masks;
  masks.reserve(subsets);
  for (std::uint64_t bits = 0; bits < subsets; ++bits) masks.push_back(bits_to_mask(bits, segments));
  const auto f = evaluate(model, masks);

  // weight[t] = t! (S - t - 1)! / S!
  std::vector<double> weight(static_cast<std::size_t>(segments));
  for (int t = 0; t < segments; ++t) {
    double v = 1.0 / segments;
    for (int i = 1; i <= t; ++i) v *= static_cast<double>(i) / (segments - i);
    weight[static_cast<std::size_t>(t)] = v;
  }
  ShapExplanation out;
  out.exact = true;
  out.attributions.assign(static_cast<std::size_t>(segments), 0.0);
  for (std::uint64_t bits = 0; bits < subsets; ++bits) {
    const auto t = static_cast<std::size_t>(std::popcount(bits));
    for (int i = 0; i < segments; ++i) {
      if (bits >> i & 1U) continue;
      out.attributions[static_cast<std::size_t>(i)] += weight[t] * (f[bits | (1ULL << i)] - f[bits]);
    }
  }
  out.baseline_value = f.front();
  out.prediction_value = f.back();
  return out;
}

ShapExplanation shap_sampled(const MaskModel& model, int segments, int n_permutations, std::uint64_t seed) {
  if (segments < 1 || n_permutations < 1) throw Error(ErrorCode::BadSpec, "invalid permutation sampling setup");
  const auto s = static_cast<std::size_t>(segments);
  std::vector<std::vector<int>> orders;
  std::map<Mask, std::size_t> index;
  std::vector<Mask> unique;
  auto intern = [&](const Mask& m) {
    auto [it, inserted] = index.try_emplace(m, unique.size());
    if (inserted) unique.push_back(m);
    return it->second;
  };
  std::vector<std::vector<std::size_t>> chains;
  for (int p = 0; p < n_permutations; ++p) {
    std::vector<int> order(s);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, "shap", static_cast<std::uint64_t>(p)));
    rng.shuffle(std::span<int>(order));
    Mask m(s, 0);
    std::vector<std::size_t> chain{intern(m)};
    for (int seg : order) {
      m[static_cast<std::size_t>(seg)] = 1;
      chain.push_back(intern(m));
    }
    orders.push_back(std::move(order));
    chains.push_back(std::move(chain));
  }
  const auto f = evaluate(model, unique);

  ShapExplanation out;
  out.permutations = n_permutations;
  out.attributions.assign(s, 0.0);
  for (std::size_t p = 0; p < orders.size(); ++p)
    for (std::size_t k = 0; k < s; ++k)
      out.attributions[static_cast<std::size_t>(orders[p][k])] += f[chains[p][k + 1]] - f[chains[p][k]];
  for (auto& a : out.attributions) a /= n_permutations;
  out.baseline_value = f[index.at(Mask(s, 0))];
  out.prediction_value = f[index.at(Mask(s, 1))];
  return out;
}

ShapExplanation shap_from_masks(const MaskModel& model, int segments, const ShapConfig& config) {
  if (segments <= config.exact_max_segments) return shap_exact(model, segments);
  return shap_sampled(model, segments, config.n_permutations, config.seed);
}

int predicted_class(const BatchPredictor& predict, const PixelArray& img) {
  nn::Tensor probs;
  try {
    probs = predict({unit_copy(img)});
  } catch (const Error& e) {
    if (e.code() == ErrorCode::ModelCallFailure || e.code() == ErrorCode::RangeTagMismatch) throw;
    throw Error(ErrorCode::ModelCallFailure, e.what());
  } catch (const std::exception& e) {
    throw Error(ErrorCode::ModelCallFailure, e.what());
  }
  if (probs.rank() != 2 || probs.dim(0) != 1 || probs.dim(1) < 1)
    throw Error(ErrorCode::ModelCallFailure, "predictor must return one probability row per image");
  const float* row = probs.data();
  return static_cast<int>(std::max_element(row, row + probs.dim(1)) - row);
}

LimeExplanation lime_explain(const BatchPredictor& predict, const PixelArray& img, const SuperpixelMap& seg,
                             int class_index, const LimeConfig& config) {
  const int cls = class_index < 0 ? predicted_class(predict, img) : class_index;
  auto out = lime_from_masks(image_mask_model(predict, img, seg, cls, config.batch_size), seg.count, config);
  out.class_index = cls;
  return out;
}

ShapExplanation shap_explain(const BatchPredictor& predict, const PixelArray& img, const SuperpixelMap& seg,
                             int class_index, const ShapConfig& config) {
  const int cls = class_index < 0 ? predicted_class(predict, img) : class_index;
  auto out = shap_from_masks(image_mask_model(predict, img, seg, cls, config.batch_size), seg.count, config);
  out.class_index = cls;
  return out;
}

PixelArray lime_overlay(const PixelArray& input, const SuperpixelMap& seg, const std::vector<int>& top_segments) {
  const PixelArray img = unit_copy(input);
  check_shapes(img, seg);
  std::vector<std::uint8_t> top(static_cast<std::size_t>(seg.count), 0);
  for (int s : top_segments) {
    if (s < 0 || s >= seg.count) throw Error(ErrorCode::ShapeMismatch, "top segment out of range");
    top[static_cast<std::size_t>(s)] = 1;
  }
  PixelArray out = img;
  const int h = seg.height, w = seg.width;
  auto inside = [&](int y, int x) { return top[static_cast<std::size_t>(seg.at(y, x))] != 0; };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const bool in = inside(y, x);
      const bool edge = (x > 0 && inside(y, x - 1) != in) || (x + 1 < w && inside(y, x + 1) != in) ||
                        (y > 0 && inside(y - 1, x) != in) || (y + 1 < h && inside(y + 1, x) != in);
      if (!edge) continue;
      for (int c = 0; c < 3; ++c) out.at(c, y, x) = kOutline[c] / 255.0f;
    }
  return out;
}

PixelArray shap_heatmap(const PixelArray& input, const SuperpixelMap& seg, const std::vector<double>& attributions) {
  const PixelArray img = unit_copy(input);
  check_shapes(img, seg);
  if (static_cast<int>(attributions.size()) != seg.count)
    throw Error(ErrorCode::ShapeMismatch, "attribution count does not match the segmentation");
  double scale = 0.0;
  for (double a : attributions) scale = std::max(scale, std::abs(a));
  PixelArray out = img;
  if (scale == 0.0) return out;
  constexpr float red[3] = {1.0f, 0.0f, 0.0f}, blue[3] = {0.0f, 0.0f, 1.0f};
  for (int y = 0; y < seg.height; ++y)
    for (int x = 0; x < seg.width; ++x) {
      const double t = attributions[static_cast<std::size_t>(seg.at(y, x))] / scale;
      if (t == 0.0) continue;
      blend(img, y, x, t > 0 ? red : blue, static_cast<float>(0.5 * std::abs(t)), out);
    }
  return out;
}

std::vector<std::string> render_lime_overlay(const PixelArray& img, const LimeExplanation& e,
                                             const SuperpixelMap& seg, const std::filesystem::path& out_path) {
  std::vector<std::string> warnings;
  if (e.top_segments.empty()) warnings.push_back("no positively weighted segments; image written without outline");
  save_image(lime_overlay(img, seg, e.top_segments), out_path);
  return warnings;
}

std::vector<std::string> render_shap_heatmap(const PixelArray& img, const ShapExplanation& e,
                                             const SuperpixelMap& seg, const std::filesystem::path& out_path) {
  std::vector<std::string> warnings;
  if (std::all_of(e.attributions.begin(), e.attributions.end(), [](double a) { return a == 0.0; }))
    warnings.push_back("all attributions are zero; image written without tint");
  save_image(shap_heatmap(img, seg, e.attributions), out_path);
  return warnings;
}

nlohmann::json to_json(const LimeExplanation& e, const std::string& image_id, const std::string& class_name,
                       std::uint64_t seed) {
  return {{"image_id", image_id},
          {"class_explained", class_name},
          {"class_index", e.class_index},
          {"method", "lime"},
          {"segment_count", e.weights.size()},
          {"values", e.weights},
          {"intercept", e.intercept},
          {"fit_r2", e.fit_r2},
          {"ridge_lambda", e.lambda_used},
          {"top_segments", e.top_segments},
          {"warnings", e.warnings},
          {"seed", seed}};
}

nlohmann::json to_json(const ShapExplanation& e, const std::string& image_id, const std::string& class_name,
                       std::uint64_t seed) {
  return {{"image_id", image_id},
          {"class_explained", class_name},
          {"class_index", e.class_index},
          {"method", "shap"},
          {"segment_count", e.attributions.size()},
          {"values", e.attributions},
          {"baseline_value", e.baseline_value},
          {"prediction_value", e.prediction_value},
          {"estimator", e.exact ? "exact" : "permutation"},
          {"permutations", e.permutations},
          {"seed", seed}};
}

}  // namespace skinlab::xai
