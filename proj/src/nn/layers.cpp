#include "skinlab/nn/layers.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <map>

#include "gemm.hpp"
#include "skinlab/error.hpp"

namespace skinlab::nn {

namespace detail {

void im2col(const float* x, int channels, int height, int width, int kernel, int stride, int padding, int out_h,
            int out_w, float* col, std::size_t ld, std::size_t col_offset) {
  for (int c = 0; c < channels; ++c) {
    const float* plane = x + static_cast<std::size_t>(c) * height * width;
    for (int ki = 0; ki < kernel; ++ki) {
      for (int kj = 0; kj < kernel; ++kj) {
        float* row = col + (static_cast<std::size_t>(c * kernel + ki) * kernel + kj) * ld + col_offset;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - padding + ki;
          float* dst = row + static_cast<std::size_t>(oy) * out_w;
          if (iy < 0 || iy >= height) {
            std::fill(dst, dst + out_w, 0.0f);
            continue;
          }
          const float* src = plane + static_cast<std::size_t>(iy) * width;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride - padding + kj;
            dst[ox] = (ix >= 0 && ix < width) ? src[ix] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im(const float* col, std::size_t ld, std::size_t col_offset, int channels, int height, int width, int kernel,
            int stride, int padding, int out_h, int out_w, float* x) {
  for (int c = 0; c < channels; ++c) {
    float* plane = x + static_cast<std::size_t>(c) * height * width;
    for (int ki = 0; ki < kernel; ++ki) {
      for (int kj = 0; kj < kernel; ++kj) {
        const float* row = col + (static_cast<std::size_t>(c * kernel + ki) * kernel + kj) * ld + col_offset;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - padding + ki;
          if (iy < 0 || iy >= height) continue;
          const float* src = row + static_cast<std::size_t>(oy) * out_w;
          float* dst = plane + static_cast<std::size_t>(iy) * width;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride - padding + kj;
            if (ix >= 0 && ix < width) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

using detail::ConstMapRow;
using detail::MapRow;
using detail::RowMat;

namespace {

void require_rank(const Tensor& x, std::size_t rank, const char* who) {
  if (x.rank() != rank)
    throw Error(ErrorCode::ShapeMismatch, std::string(who) + " expects rank-" + std::to_string(rank) + " input, got " +
                                              x.shape_string());
}

void require_cache(const Tensor& cache, const char* who) {
  if (cache.numel() == 0)
    throw Error(ErrorCode::ShapeMismatch, std::string(who) + ": backward without a train-mode forward");
}

int conv_out(int size, const ConvGeometry& g) { return (size + 2 * g.padding - g.kernel) / g.stride + 1; }

// NCHW chunk [n0, n0+nb) -> [C, nb*P] matrix.
void gather_chunk(const float* x, int n0, int nb, int channels, std::size_t plane, float* dst) {
  const std::size_t ld = static_cast<std::size_t>(nb) * plane;
  for (int j = 0; j < nb; ++j)
    for (int c = 0; c < channels; ++c)
      std::memcpy(dst + c * ld + j * plane, x + ((static_cast<std::size_t>(n0 + j) * channels + c) * plane),
                  plane * sizeof(float));
}

void scatter_chunk(const float* src, int n0, int nb, int channels, std::size_t plane, float* y) {
  const std::size_t ld = static_cast<std::size_t>(nb) * plane;
  for (int j = 0; j < nb; ++j)
    for (int c = 0; c < channels; ++c)
      std::memcpy(y + ((static_cast<std::size_t>(n0 + j) * channels + c) * plane), src + c * ld + j * plane,
                  plane * sizeof(float));
}

int chunk_size(std::size_t per_sample_floats) {
  return static_cast<int>(std::max<std::size_t>(1, detail::kColumnBudget / std::max<std::size_t>(1, per_sample_floats)));
}

void add_channel_bias(Tensor& y, const Parameter* bias) {
  if (!bias) return;
  const int n = y.dim(0);
  const int c = y.dim(1);
  const std::size_t plane = y.numel() / (static_cast<std::size_t>(n) * c);
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      float* p = y.data() + (static_cast<std::size_t>(i) * c + ch) * plane;
      const float b = bias->value[ch];
      for (std::size_t k = 0; k < plane; ++k) p[k] += b;
    }
}

void accumulate_channel_bias_grad(const Tensor& g, Parameter* bias) {
  if (!bias) return;
  const int n = g.dim(0);
  const int c = g.dim(1);
  const std::size_t plane = g.numel() / (static_cast<std::size_t>(n) * c);
  for (int ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
      const float* p = g.data() + (static_cast<std::size_t>(i) * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) s += p[k];
    }
    bias->grad[ch] += static_cast<float>(s);
  }
}

std::string geometry_string(const ConvGeometry& g) {
  return "k" + std::to_string(g.kernel) + " s" + std::to_string(g.stride) + " p" + std::to_string(g.padding);
}

}  // namespace

// ---------------------------------------------------------------- Linear

Linear::Linear(int in_features, int out_features, bool bias)
    : in_(in_features), out_(out_features), weight_({out_features, in_features}) {
  if (in_features <= 0 || out_features <= 0) throw Error(ErrorCode::BadSpec, "Linear sizes must be positive");
  if (bias) bias_ = std::make_unique<Parameter>(std::vector<int>{out_features});
}

Tensor Linear::forward(const Tensor& x, Mode mode) {
  require_rank(x, 2, "Linear");
  if (x.dim(1) != in_) throw Error(ErrorCode::ShapeMismatch, "Linear expects " + std::to_string(in_) + " features");
  const int n = x.dim(0);
  Tensor y({n, out_});
  MapRow(y.data(), n, out_).noalias() = ConstMapRow(x.data(), n, in_) * ConstMapRow(weight_.value.data(), out_, in_).transpose();
  if (bias_)
    for (int i = 0; i < n; ++i)
      for (int o = 0; o < out_; ++o) y[static_cast<std::size_t>(i) * out_ + o] += bias_->value[o];
  input_ = mode == Mode::Train ? x : Tensor{};
  return y;
}

Tensor Linear::backward(const Tensor& grad_out) {
  require_cache(input_, "Linear");
  const int n = input_.dim(0);
  ConstMapRow g(grad_out.data(), n, out_);
  MapRow(weight_.grad.data(), out_, in_).noalias() += g.transpose() * ConstMapRow(input_.data(), n, in_);
  if (bias_)
    for (int o = 0; o < out_; ++o) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += g(i, o);
      bias_->grad[o] += static_cast<float>(s);
    }
  Tensor dx({n, in_});
  MapRow(dx.data(), n, in_).noalias() = g * ConstMapRow(weight_.value.data(), out_, in_);
  return dx;
}

void Linear::collect(const std::string& prefix, std::vector<NamedTensor>& out) {
  out.push_back({prefix + "weight", &weight_.value, &weight_});
  if (bias_) out.push_back({prefix + "bias", &bias_->value, bias_.get()});
}

std::string Linear::describe() const { return "Linear(" + std::to_string(in_) + "->" + std::to_string(out_) + ")"; }

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(int in_channels, int out_channels, ConvGeometry geometry, bool bias)
    : in_(in_channels),
      out_(out_channels),
      geo_(geometry),
      weight_({out_channels, in_channels, geometry.kernel, geometry.kernel}) {
  if (in_channels <= 0 || out_channels <= 0 || geometry.kernel <= 0 || geometry.stride <= 0 || geometry.padding < 0)
    throw Error(ErrorCode::BadSpec, "invalid Conv2d geometry");
  if (bias) bias_ = std::make_unique<Parameter>(std::vector<int>{out_channels});
}

Tensor Conv2d::forward(const Tensor& x, Mode mode) {
  require_rank(x, 4, "Conv2d");
  if (x.dim(1) != in_)
    throw Error(ErrorCode::ShapeMismatch, "Conv2d expects " + std::to_string(in_) + " channels, got " + x.shape_string());
  const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
  const int ho = conv_out(h, geo_), wo = conv_out(w, geo_);
  if (ho <= 0 || wo <= 0) throw Error(ErrorCode::ShapeMismatch, "Conv2d input too small: " + x.shape_string());
  const int k = geo_.kernel;
  const std::size_t rows = static_cast<std::size_t>(in_) * k * k;
  const std::size_t plane = static_cast<std::size_t>(ho) * wo;
  const std::size_t in_plane = static_cast<std::size_t>(h) * w;
  Tensor y({n, out_, ho, wo});
  const bool pointwise = k == 1 && geo_.stride == 1 && geo_.padding == 0;
  const int chunk = chunk_size(rows * plane);
  std::vector<float> col, out;
  ConstMapRow wmat(weight_.value.data(), out_, static_cast<Eigen::Index>(rows));
  for (int n0 = 0; n0 < n; n0 += chunk) {
    const int nb = std::min(chunk, n - n0);
    const std::size_t cols = static_cast<std::size_t>(nb) * plane;
    col.resize(rows * cols);
    if (pointwise)
      gather_chunk(x.data(), n0, nb, in_, in_plane, col.data());
    else
      for (int j = 0; j < nb; ++j)
        detail::im2col(x.data() + static_cast<std::size_t>(n0 + j) * in_ * in_plane, in_, h, w, k, geo_.stride,
                       geo_.padding, ho, wo, col.data(), cols, j * plane);
    out.resize(static_cast<std::size_t>(out_) * cols);
    MapRow(out.data(), out_, cols).noalias() = wmat * ConstMapRow(col.data(), rows, cols);
    scatter_chunk(out.data(), n0, nb, out_, plane, y.data());
  }
  add_channel_bias(y, bias_.get());
  input_ = mode == Mode::Train ? x : Tensor{};
  return y;
}

Tensor Conv2d::backward(const Tensor& grad_out) {
  require_cache(input_, "Conv2d");
  const int n = input_.dim(0), h = input_.dim(2), w = input_.dim(3);
  const int ho = grad_out.dim(2), wo = grad_out.dim(3);
  const int k = geo_.kernel;
  const std::size_t rows = static_cast<std::size_t>(in_) * k * k;
  const std::size_t plane = static_cast<std::size_t>(ho) * wo;
  const std::size_t in_plane = static_cast<std::size_t>(h) * w;
  const bool pointwise = k == 1 && geo_.stride == 1 && geo_.padding == 0;
  Tensor dx(input_.shape());
  accumulate_channel_bias_grad(grad_out, bias_.get());
  const int chunk = chunk_size(rows * plane);
  std::vector<float> col, g, dcol;
  ConstMapRow wmat(weight_.value.data(), out_, static_cast<Eigen::Index>(rows));
  MapRow dw(weight_.grad.data(), out_, static_cast<Eigen::Index>(rows));
  for (int n0 = 0; n0 < n; n0 += chunk) {
    const int nb = std::min(chunk, n - n0);
    const std::size_t cols = static_cast<std::size_t>(nb) * plane;
    col.resize(rows * cols);
    if (pointwise)
      gather_chunk(input_.data(), n0, nb, in_, in_plane, col.data());
    else
      for (int j = 0; j < nb; ++j)
        detail::im2col(input_.data() + static_cast<std::size_t>(n0 + j) * in_ * in_plane, in_, h, w, k, geo_.stride,
                       geo_.padding, ho, wo, col.data(), cols, j * plane);
    g.resize(static_cast<std::size_t>(out_) * cols);
    gather_chunk(grad_out.data(), n0, nb, out_, plane, g.data());
    ConstMapRow gm(g.data(), out_, cols);
    dw.noalias() += gm * ConstMapRow(col.data(), rows, cols).transpose();
    dcol.resize(rows * cols);
    MapRow(dcol.data(), rows, cols).noalias() = wmat.transpose() * gm;
    if (pointwise) {
      scatter_chunk(dcol.data(), n0, nb, in_, in_plane, dx.data());
    } else {
      for (int j = 0; j < nb; ++j)
        detail::col2im(dcol.data(), cols, j * plane, in_, h, w, k, geo_.stride, geo_.padding, ho, wo,
                       dx.data() + static_cast<std::size_t>(n0 + j) * in_ * in_plane);
    }
  }
  return dx;
}

void Conv2d::collect(const std::string& prefix, std::vector<NamedTensor>& out) {
  out.push_back({prefix + "weight", &weight_.value, &weight_});
  if (bias_) out.push_back({prefix + "bias", &bias_->value, bias_.get()});
}

std::string Conv2d::describe() const {
  return "Conv2d(" + std::to_string(in_) + "->" + std::to_string(out_) + ", " + geometry_string(geo_) + ")";
}

// ---------------------------------------------------------------- ConvTranspose2d

ConvTranspose2d::ConvTranspose2d(int in_channels, int out_channels, ConvGeometry geometry, bool bias)
    : in_(in_channels),
      out_(out_channels),
      geo_(geometry),
      weight_({in_channels, out_channels, geometry.kernel, geometry.kernel}) {
  if (in_channels <= 0 || out_channels <= 0 || geometry.kernel <= 0 || geometry.stride <= 0 || geometry.padding < 0)
    throw Error(ErrorCode::BadSpec, "invalid ConvTranspose2d geometry");
  if (bias) bias_ = std::make_unique<Parameter>(std::vector<int>{out_channels});
}

Tensor ConvTranspose2d::forward(const Tensor& x, Mode mode) {
  require_rank(x, 4, "ConvTranspose2d");
  if (x.dim(1) != in_)
    throw Error(ErrorCode::ShapeMismatch, "ConvTranspose2d expects " + std::to_string(in_) + " channels, got " +
                                              x.shape_string());
  const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
  const int k = geo_.kernel;
  const int ho = (h - 1) * geo_.stride - 2 * geo_.padding + k;
  const int wo = (w - 1) * geo_.stride - 2 * geo_.padding + k;
  if (ho <= 0 || wo <= 0) throw Error(ErrorCode::ShapeMismatch, "ConvTranspose2d output would be empty");
  const std::size_t rows = static_cast<std::size_t>(out_) * k * k;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const std::size_t out_plane = static_cast<std::size_t>(ho) * wo;
  Tensor y({n, out_, ho, wo});
  const int chunk = chunk_size(rows * plane);
  std::vector<float> xm, col;
  ConstMapRow wmat(weight_.value.data(), in_, static_cast<Eigen::Index>(rows));
  for (int n0 = 0; n0 < n; n0 += chunk) {
    const int nb = std::min(chunk, n - n0);
    const std::size_t cols = static_cast<std::size_t>(nb) * plane;
    xm.resize(static_cast<std::size_t>(in_) * cols);
    gather_chunk(x.data(), n0, nb, in_, plane, xm.data());
    col.resize(rows * cols);
    MapRow(col.data(), rows, cols).noalias() = wmat.transpose() * ConstMapRow(xm.data(), in_, cols);
    for (int j = 0; j < nb; ++j)
      detail::col2im(col.data(), cols, j * plane, out_, ho, wo, k, geo_.stride, geo_.padding, h, w,
                     y.data() + static_cast<std::size_t>(n0 + j) * out_ * out_plane);
  }
  add_channel_bias(y, bias_.get());
  input_ = mode == Mode::Train ? x : Tensor{};
  return y;
}

Tensor ConvTranspose2d::backward(const Tensor& grad_out) {
  require_cache(input_, "ConvTranspose2d");
  const int n = input_.dim(0), h = input_.dim(2), w = input_.dim(3);
  const int ho = grad_out.dim(2), wo = grad_out.dim(3);
  const int k = geo_.kernel;
  const std::size_t rows = static_cast<std::size_t>(out_) * k * k;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const std::size_t out_plane = static_cast<std::size_t>(ho) * wo;
  Tensor dx(input_.shape());
  accumulate_channel_bias_grad(grad_out, bias_.get());
  const int chunk = chunk_size(rows * plane);
  std::vector<float> xm, dcol, dxm;
  ConstMapRow wmat(weight_.value.data(), in_, static_cast<Eigen::Index>(rows));
  MapRow dw(weight_.grad.data(), in_, static_cast<Eigen::Index>(rows));
  for (int n0 = 0; n0 < n; n0 += chunk) {
    const int nb = std::min(chunk, n - n0);
    const std::size_t cols = static_cast<std::size_t>(nb) * plane;
    xm.resize(static_cast<std::size_t>(in_) * cols);
    gather_chunk(input_.data(), n0, nb, in_, plane, xm.data());
    dcol.resize(rows * cols);
    for (int j = 0; j < nb; ++j)
      detail::im2col(grad_out.data() + static_cast<std::size_t>(n0 + j) * out_ * out_plane, out_, ho, wo, k,
                     geo_.stride, geo_.padding, h, w, dcol.data(), cols, j * plane);
    ConstMapRow dc(dcol.data(), rows, cols);
    dw.noalias() += ConstMapRow(xm.data(), in_, cols) * dc.transpose();
    dxm.resize(static_cast<std::size_t>(in_) * cols);
    MapRow(dxm.data(), in_, cols).noalias() = wmat * dc;
    scatter_chunk(dxm.data(), n0, nb, in_, plane, dx.data());
  }
  return dx;
}

void ConvTranspose2d::collect(const std::string& prefix, std::vector<NamedTensor>& out) {
  out.push_back({prefix + "weight", &weight_.value, &weight_});
  if (bias_) out.push_back({prefix + "bias", &bias_->value, bias_.get()});
}

std::string ConvTranspose2d::describe() const {
  return "ConvTranspose2d(" + std::to_string(in_) + "->" + std::to_string(out_) + ", " + geometry_string(geo_) + ")";
}

// ---------------------------------------------------------------- BatchNorm

BatchNorm::BatchNorm(int channels, float momentum, float eps)
    : channels_(channels),
      momentum_(momentum),
      eps_(eps),
      gamma_({channels}),
      beta_({channels}),
      running_mean_({channels}, 0.0f),
      running_var_({channels}, 1.0f) {
  if (channels <= 0) throw Error(ErrorCode::BadSpec, "BatchNorm channels must be positive");
  gamma_.value.fill(1.0f);
}

Tensor BatchNorm::forward(const Tensor& x, Mode mode) {
  if ((x.rank() != 2 && x.rank() != 4) || x.dim(1) != channels_)
    throw Error(ErrorCode::ShapeMismatch, "BatchNorm(" + std::to_string(channels_) + ") got " + x.shape_string());
  const int n = x.dim(0);
  const std::size_t plane = x.numel() / (static_cast<std::size_t>(n) * channels_);
  const std::size_t count = static_cast<std::size_t>(n) * plane;
  Tensor y(x.shape());
  if (mode == Mode::Eval) {
    for (int c = 0; c < channels_; ++c) {
      const float scale = gamma_.value[c] / std::sqrt(running_var_[c] + eps_);
      const float shift = beta_.value[c] - running_mean_[c] * scale;
      for (int i = 0; i < n; ++i) {
        const std::size_t off = (static_cast<std::size_t>(i) * channels_ + c) * plane;
        for (std::size_t k = 0; k < plane; ++k) y[off + k] = x[off + k] * scale + shift;
      }
    }
    normalized_ = Tensor{};
    return y;
  }
  if (count < 2) throw Error(ErrorCode::ShapeMismatch, "BatchNorm training needs more than one value per channel");
  normalized_ = Tensor(x.shape());
  inv_std_.assign(channels_, 0.0f);
  for (int c = 0; c < channels_; ++c) {
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
      const std::size_t off = (static_cast<std::size_t>(i) * channels_ + c) * plane;
      for (std::size_t k = 0; k < plane; ++k) sum += x[off + k];
    }
    const double mean = sum / static_cast<double>(count);
    double sq = 0.0;
    for (int i = 0; i < n; ++i) {
      const std::size_t off = (static_cast<std::size_t>(i) * channels_ + c) * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        const double d = x[off + k] - mean;
        sq += d * d;
      }
    }
    const double var = sq / static_cast<double>(count);
    const auto inv = static_cast<float>(1.0 / std::sqrt(var + eps_));
    inv_std_[c] = inv;
    const auto meanf = static_cast<float>(mean);
    for (int i = 0; i < n; ++i) {
      const std::size_t off = (static_cast<std::size_t>(i) * channels_ + c) * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        const float xh = (x[off + k] - meanf) * inv;
        normalized_[off + k] = xh;
        y[off + k] = gamma_.value[c] * xh + beta_.value[c];
      }
    }
    running_mean_[c] = (1.0f - momentum_) * running_mean_[c] + momentum_ * meanf;
    running_var_[c] = (1.0f - momentum_) * running_var_[c] +
                      momentum_ * static_cast<float>(sq / static_cast<double>(count - 1));
  }
  return y;
}

Tensor BatchNorm::backward(const Tensor& grad_out) {
  require_cache(normalized_, "BatchNorm");
  const int n = grad_out.dim(0);
  const std::size_t plane = grad_out.numel() / (static_cast<std::size_t>(n) * channels_);
  const double count = static_cast<double>(n) * static_cast<double>(plane);
  Tensor dx(grad_out.shape());
  for (int c = 0; c < channels_; ++c) {
    double sum_dy = 0.0, sum_dy_xh = 0.0;
    for (int i = 0; i < n; ++i) {
      const std::size_t off = (static_cast<std::size_t>(i) * channels_ + c) * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        sum_dy += grad_out[off + k];
        sum_dy_xh += static_cast<double>(grad_out[off + k]) * normalized_[off + k];
      }
    }
    gamma_.grad[c] += static_cast<float>(sum_dy_xh);
    beta_.grad[c] += static_cast<float>(sum_dy);
    const float g = gamma_.value[c];
    const float scale = g * inv_std_[c];
    const auto mean_dy = static_cast<float>(sum_dy / count);
    const auto mean_dy_xh = static_cast<float>(sum_dy_xh / count);
    for (int i = 0; i < n; ++i) {
      const std::size_t off = (static_cast<std::size_t>(i) * channels_ + c) * plane;
      for (std::size_t k = 0; k < plane; ++k)
        dx[off + k] = scale * (grad_out[off + k] - mean_dy - normalized_[off + k] * mean_dy_xh);
    }
  }
  return dx;
}

void BatchNorm::collect(const std::string& prefix, std::vector<NamedTensor>& out) {
  out.push_back({prefix + "weight", &gamma_.value, &gamma_});
  out.push_back({prefix + "bias", &beta_.value, &beta_});
  out.push_back({prefix + "running_mean", &running_mean_, nullptr});
  out.push_back({prefix + "running_var", &running_var_, nullptr});
}

std::string BatchNorm::describe() const { return "BatchNorm(" + std::to_string(channels_) + ")"; }

// ---------------------------------------------------------------- Activation

Activation::Activation(ActivationKind kind, float negative_slope) : kind_(kind), slope_(negative_slope) {}

Tensor Activation::forward(const Tensor& x, Mode mode) {
  Tensor y(x.shape());
  const std::size_t n = x.numel();
  switch (kind_) {
    case ActivationKind::ReLU:
      for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
      break;
    case ActivationKind::LeakyReLU:
      for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : slope_ * x[i];
      break;
    case ActivationKind::Tanh:
      for (std::size_t i = 0; i < n; ++i) y[i] = std::tanh(x[i]);
      break;
    case ActivationKind::Sigmoid:
      for (std::size_t i = 0; i < n; ++i) y[i] = 1.0f / (1.0f + std::exp(-x[i]));
      break;
  }
  if (mode == Mode::Train)
    cache_ = (kind_ == ActivationKind::ReLU || kind_ == ActivationKind::LeakyReLU) ? x : y;
  else
    cache_ = Tensor{};
  return y;
}

Tensor Activation::backward(const Tensor& grad_out) {
  require_cache(cache_, "Activation");
  Tensor dx(grad_out.shape());
  const std::size_t n = grad_out.numel();
  switch (kind_) {
    case ActivationKind::ReLU:
      for (std::size_t i = 0; i < n; ++i) dx[i] = cache_[i] > 0.0f ? grad_out[i] : 0.0f;
      break;
    case ActivationKind::LeakyReLU:
      for (std::size_t i = 0; i < n; ++i) dx[i] = cache_[i] > 0.0f ? grad_out[i] : slope_ * grad_out[i];
      break;
    case ActivationKind::Tanh:
      for (std::size_t i = 0; i < n; ++i) dx[i] = grad_out[i] * (1.0f - cache_[i] * cache_[i]);
      break;
    case ActivationKind::Sigmoid:
      for (std::size_t i = 0; i < n; ++i) dx[i] = grad_out[i] * cache_[i] * (1.0f - cache_[i]);
      break;
  }
  return dx;
}

std::string Activation::describe() const {
  switch (kind_) {
    case ActivationKind::ReLU: return "ReLU";
    case ActivationKind::LeakyReLU: return "LeakyReLU(" + std::to_string(slope_) + ")";
    case ActivationKind::Tanh: return "Tanh";
    case ActivationKind::Sigmoid: return "Sigmoid";
  }
  return "Activation";
}

// ---------------------------------------------------------------- Dropout

Dropout::Dropout(float p) : p_(p) {
  if (p < 0.0f || p >= 1.0f) throw Error(ErrorCode::BadSpec, "dropout probability must be in [0, 1)");
}

Tensor Dropout::forward(const Tensor& x, Mode mode) {
  if (mode == Mode::Eval || p_ == 0.0f) {
    mask_.assign(x.numel(), 1.0f);
    return x;
  }
  Tensor y(x.shape());
  mask_.resize(x.numel());
  const float keep_scale = 1.0f / (1.0f - p_);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    mask_[i] = rng_.uniform() < p_ ? 0.0f : keep_scale;
    y[i] = x[i] * mask_[i];
  }
  return y;
}

Tensor Dropout::backward(const Tensor& grad_out) {
  if (mask_.size() != grad_out.numel()) throw Error(ErrorCode::ShapeMismatch, "Dropout: backward without forward");
  Tensor dx(grad_out.shape());
  for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] = grad_out[i] * mask_[i];
  return dx;
}

std::string Dropout::describe() const { return "Dropout(" + std::to_string(p_) + ")"; }

// ---------------------------------------------------------------- Reshape / pooling

Tensor Reshape::forward(const Tensor& x, Mode /*mode*/) {
  input_shape_ = x.shape();
  std::vector<int> shape{x.dim(0)};
  shape.insert(shape.end(), sample_shape_.begin(), sample_shape_.end());
  return x.reshaped(std::move(shape));
}

Tensor Reshape::backward(const Tensor& grad_out) { return grad_out.reshaped(input_shape_); }

std::string Reshape::describe() const {
  std::string s = "Reshape(";
  for (std::size_t i = 0; i < sample_shape_.size(); ++i) s += (i ? "x" : "") + std::to_string(sample_shape_[i]);
  return s + ")";
}

Tensor GlobalAvgPool::forward(const Tensor& x, Mode /*mode*/) {
  require_rank(x, 4, "GlobalAvgPool");
  input_shape_ = x.shape();
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor y({n, c});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const float* p = x.data() + (static_cast<std::size_t>(i) * c + ch) * plane;
      double s = 0.0;
      for (std::size_t k = 0; k < plane; ++k) s += p[k];
      y[static_cast<std::size_t>(i) * c + ch] = static_cast<float>(s / static_cast<double>(plane));
    }
  return y;
}

Tensor GlobalAvgPool::backward(const Tensor& grad_out) {
  Tensor dx(input_shape_);
  const int n = input_shape_[0], c = input_shape_[1];
  const std::size_t plane = static_cast<std::size_t>(input_shape_[2]) * input_shape_[3];
  const float inv = 1.0f / static_cast<float>(plane);
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const float g = grad_out[static_cast<std::size_t>(i) * c + ch] * inv;
      float* p = dx.data() + (static_cast<std::size_t>(i) * c + ch) * plane;
      std::fill(p, p + plane, g);
    }
  return dx;
}

Tensor MaxPool2d::forward(const Tensor& x, Mode mode) {
  require_rank(x, 4, "MaxPool2d");
  input_shape_ = x.shape();
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = conv_out(h, geo_), wo = conv_out(w, geo_);
  Tensor y({n, c, ho, wo});
  argmax_.assign(mode == Mode::Train ? y.numel() : 0, 0);
  std::size_t o = 0;
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * h * w;
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox, ++o) {
          float best = -std::numeric_limits<float>::infinity();
          std::size_t best_idx = base;
          for (int ki = 0; ki < geo_.kernel; ++ki) {
            const int iy = oy * geo_.stride - geo_.padding + ki;
            if (iy < 0 || iy >= h) continue;
            for (int kj = 0; kj < geo_.kernel; ++kj) {
              const int ix = ox * geo_.stride - geo_.padding + kj;
              if (ix < 0 || ix >= w) continue;
              const std::size_t idx = base + static_cast<std::size_t>(iy) * w + ix;
              if (x[idx] > best) {
                best = x[idx];
                best_idx = idx;
              }
            }
          }
          y[o] = best;
          if (mode == Mode::Train) argmax_[o] = best_idx;
        }
    }
  return y;
}

Tensor MaxPool2d::backward(const Tensor& grad_out) {
  if (argmax_.size() != grad_out.numel()) throw Error(ErrorCode::ShapeMismatch, "MaxPool2d: backward without forward");
  Tensor dx(input_shape_);
  for (std::size_t o = 0; o < grad_out.numel(); ++o) dx[argmax_[o]] += grad_out[o];
  return dx;
}

std::string MaxPool2d::describe() const { return "MaxPool2d(" + geometry_string(geo_) + ")"; }

// ---------------------------------------------------------------- Sequential / Residual

Sequential& Sequential::add(std::string name, std::unique_ptr<Layer> layer) {
  children_.emplace_back(std::move(name), std::move(layer));
  return *this;
}

Tensor Sequential::forward(const Tensor& x, Mode mode) {
  Tensor h = x;
  for (auto& [name, layer] : children_) h = layer->forward(h, mode);
  return h;
}

Tensor Sequential::backward(const Tensor& grad_out) {
  Tensor g = grad_out;
  for (auto it = children_.rbegin(); it != children_.rend(); ++it) g = it->second->backward(g);
  return g;
}

void Sequential::collect(const std::string& prefix, std::vector<NamedTensor>& out) {
  for (auto& [name, layer] : children_) layer->collect(prefix + name + ".", out);
}

void Sequential::reseed(std::uint64_t seed) {
  for (std::size_t i = 0; i < children_.size(); ++i) children_[i].second->reseed(derive_seed(seed, i));
}

std::string Sequential::describe() const {
  std::string s = "Sequential(";
  for (std::size_t i = 0; i < children_.size(); ++i)
    s += (i ? ", " : "") + children_[i].first + "=" + children_[i].second->describe();
  return s + ")";
}

Layer* Sequential::find(const std::string& name) {
  for (auto& [n, layer] : children_)
    if (n == name) return layer.get();
  return nullptr;
}

Residual::Residual(std::unique_ptr<Sequential> main, std::unique_ptr<Sequential> shortcut)
    : main_(std::move(main)), shortcut_(std::move(shortcut)) {}

Tensor Residual::forward(const Tensor& x, Mode mode) {
  Tensor y = main_->forward(x, mode);
  Tensor skip = shortcut_ ? shortcut_->forward(x, mode) : x;
  if (skip.shape() != y.shape())
    throw Error(ErrorCode::ShapeMismatch, "residual branch shapes differ: " + y.shape_string() + " vs " +
                                              skip.shape_string());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = std::max(0.0f, y[i] + skip[i]);
  sum_ = mode == Mode::Train ? y : Tensor{};
  return y;
}

Tensor Residual::backward(const Tensor& grad_out) {
  require_cache(sum_, "Residual");
  Tensor g(grad_out.shape());
  for (std::size_t i = 0; i < g.numel(); ++i) g[i] = sum_[i] > 0.0f ? grad_out[i] : 0.0f;
  Tensor dx = main_->backward(g);
  Tensor dskip = shortcut_ ? shortcut_->backward(g) : g;
  for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += dskip[i];
  return dx;
}

void Residual::collect(const std::string& prefix, std::vector<NamedTensor>& out) {
  main_->collect(prefix, out);
  if (shortcut_) shortcut_->collect(prefix + "downsample.", out);
}

void Residual::reseed(std::uint64_t seed) {
  main_->reseed(derive_seed(seed, 0));
  if (shortcut_) shortcut_->reseed(derive_seed(seed, 1));
}

std::string Residual::describe() const {
  return "Residual(" + main_->describe() + (shortcut_ ? ", downsample=" + shortcut_->describe() : "") + ")";
}

// ---------------------------------------------------------------- helpers

std::vector<NamedTensor> named_tensors(Layer& layer, const std::string& prefix) {
  std::vector<NamedTensor> out;
  layer.collect(prefix, out);
  return out;
}

std::vector<Parameter*> parameters(Layer& layer) {
  std::vector<Parameter*> out;
  for (auto& nt : named_tensors(layer))
    if (nt.param) out.push_back(nt.param);
  return out;
}

void zero_grad(Layer& layer) {
  for (Parameter* p : parameters(layer)) p->grad.fill(0.0f);
}

void set_trainable(Layer& layer, bool trainable) {
  for (Parameter* p : parameters(layer)) p->trainable = trainable;
}

std::size_t count_parameters(Layer& layer, bool trainable_only) {
  std::size_t n = 0;
  for (Parameter* p : parameters(layer))
    if (!trainable_only || p->trainable) n += p->value.numel();
  return n;
}

std::uint64_t weights_checksum(Layer& layer) {
  auto tensors = named_tensors(layer);
  std::sort(tensors.begin(), tensors.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  std::uint64_t h = fnv1a64("");
  for (const auto& nt : tensors) {
    h = fnv1a64(nt.name, h);
    const auto* bytes = reinterpret_cast<const char*>(nt.tensor->data());
    h = fnv1a64(std::string_view(bytes, nt.tensor->numel() * sizeof(float)), h);
  }
  return h;
}

}  // namespace skinlab::nn
