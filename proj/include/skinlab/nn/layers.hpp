#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "skinlab/nn/tensor.hpp"
#include "skinlab/rng.hpp"

namespace skinlab::nn {

enum class Mode { Train, Eval };

struct Parameter {
  Tensor value;
  Tensor grad;
  bool trainable = true;

  explicit Parameter(std::vector<int> shape) : value(shape), grad(std::move(shape)) {}
};

// Named view over every persistent tensor of a network. `param` is null for
// buffers such as batch-norm running statistics.
struct NamedTensor {
  std::string name;
  Tensor* tensor;
  Parameter* param;
};

// A differentiable stage. forward() in Train mode caches what backward()
// needs; backward() accumulates into parameter gradients and returns the
// gradient with respect to the forward input. Eval-mode forwards cache
// nothing and cannot be differentiated.
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, Mode mode) = 0;
  virtual Tensor backward(const Tensor& grad_out) = 0;
  virtual void collect(const std::string& /*prefix*/, std::vector<NamedTensor>& /*out*/) {}
  virtual void reseed(std::uint64_t /*seed*/) {}
  virtual std::string describe() const = 0;
};

class Linear final : public Layer {
 public:
  Linear(int in_features, int out_features, bool bias = true);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) override;
  std::string describe() const override;

  Parameter& weight() { return weight_; }
  Parameter* bias() { return bias_.get(); }
  int in_features() const { return in_; }
  int out_features() const { return out_; }

 private:
  int in_, out_;
  Parameter weight_;  // [out, in]
  std::unique_ptr<Parameter> bias_;
  Tensor input_;
};

struct ConvGeometry {
  int kernel = 3;
  int stride = 1;
  int padding = 0;
};

class Conv2d final : public Layer {
 public:
  Conv2d(int in_channels, int out_channels, ConvGeometry geometry, bool bias = true);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) override;
  std::string describe() const override;

  Parameter& weight() { return weight_; }
  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  const ConvGeometry& geometry() const { return geo_; }

 private:
  int in_, out_;
  ConvGeometry geo_;
  Parameter weight_;  // [out, in, k, k]
  std::unique_ptr<Parameter> bias_;
  Tensor input_;
};

class ConvTranspose2d final : public Layer {
 public:
  ConvTranspose2d(int in_channels, int out_channels, ConvGeometry geometry, bool bias = true);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) override;
  std::string describe() const override;

  Parameter& weight() { return weight_; }
  int in_channels() const { return in_; }
  int out_channels() const { return out_; }

 private:
  int in_, out_;
  ConvGeometry geo_;
  Parameter weight_;  // [in, out, k, k]
  std::unique_ptr<Parameter> bias_;
  Tensor input_;
};

// Batch normalization over the channel axis of NC or NCHW input.
class BatchNorm final : public Layer {
 public:
  explicit BatchNorm(int channels, float momentum = 0.1f, float eps = 1e-5f);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) override;
  std::string describe() const override;

  int channels() const { return channels_; }
  Parameter& gamma() { return gamma_; }
  Parameter& beta() { return beta_; }
  Tensor& running_mean() { return running_mean_; }
  Tensor& running_var() { return running_var_; }

 private:
  int channels_;
  float momentum_, eps_;
  Parameter gamma_, beta_;
  Tensor running_mean_, running_var_;
  Tensor normalized_;
  std::vector<float> inv_std_;
};

enum class ActivationKind { ReLU, LeakyReLU, Tanh, Sigmoid };

class Activation final : public Layer {
 public:
  explicit Activation(ActivationKind kind, float negative_slope = 0.2f);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  std::string describe() const override;
  ActivationKind kind() const { return kind_; }

 private:
  ActivationKind kind_;
  float slope_;
  Tensor cache_;
};

class Dropout final : public Layer {
 public:
  explicit Dropout(float p);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void reseed(std::uint64_t seed) override { rng_ = Rng(seed); }
  std::string describe() const override;

 private:
  float p_;
  Rng rng_{0};
  std::vector<float> mask_;
};

// Reshapes each sample; the batch axis is kept.
class Reshape final : public Layer {
 public:
  explicit Reshape(std::vector<int> sample_shape) : sample_shape_(std::move(sample_shape)) {}
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  std::string describe() const override;

 private:
  std::vector<int> sample_shape_;
  std::vector<int> input_shape_;
};

class GlobalAvgPool final : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  std::string describe() const override { return "GlobalAvgPool"; }

 private:
  std::vector<int> input_shape_;
};

class MaxPool2d final : public Layer {
 public:
  explicit MaxPool2d(ConvGeometry geometry) : geo_(geometry) {}
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  std::string describe() const override;

 private:
  ConvGeometry geo_;
  std::vector<int> input_shape_;
  std::vector<std::size_t> argmax_;
};

class Sequential : public Layer {
 public:
  Sequential() = default;
  Sequential& add(std::string name, std::unique_ptr<Layer> layer);
  template <typename L, typename... Args>
  L& emplace(std::string name, Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    add(std::move(name), std::move(layer));
    return ref;
  }

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) override;
  void reseed(std::uint64_t seed) override;
  std::string describe() const override;

  std::size_t size() const { return children_.size(); }
  Layer& at(std::size_t i) { return *children_.at(i).second; }
  const std::string& name_at(std::size_t i) const { return children_.at(i).first; }
  Layer* find(const std::string& name);

 private:
  std::vector<std::pair<std::string, std::unique_ptr<Layer>>> children_;
};

// relu(main(x) + shortcut(x)); the shortcut is the identity when absent.
// Main-path children are named directly under the block prefix, the
// projection shortcut under "downsample.".
class Residual final : public Layer {
 public:
  Residual(std::unique_ptr<Sequential> main, std::unique_ptr<Sequential> shortcut);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) override;
  void reseed(std::uint64_t seed) override;
  std::string describe() const override;

 private:
  std::unique_ptr<Sequential> main_;
  std::unique_ptr<Sequential> shortcut_;
  Tensor sum_;
};

// Helpers over a layer tree.
std::vector<NamedTensor> named_tensors(Layer& layer, const std::string& prefix = "");
std::vector<Parameter*> parameters(Layer& layer);
void zero_grad(Layer& layer);
void set_trainable(Layer& layer, bool trainable);
std::size_t count_parameters(Layer& layer, bool trainable_only);
// FNV-1a over the bytes of every named tensor, in name order.
std::uint64_t weights_checksum(Layer& layer);

}  // namespace skinlab::nn
