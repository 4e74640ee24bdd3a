#include "skinlab/nn/tensor.hpp"

#include <algorithm>
#include <functional>
#include <numeric>

#include "skinlab/error.hpp"

namespace skinlab::nn {

std::size_t shape_numel(const std::vector<int>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, int d) { return a * static_cast<std::size_t>(d); });
}

Tensor::Tensor(std::vector<int> shape, float fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(std::vector<int> shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_numel(shape_))
    throw Error(ErrorCode::ShapeMismatch, "tensor data size does not match shape " + shape_string());
}

Tensor Tensor::reshaped(std::vector<int> shape) const {
  if (shape_numel(shape) != numel()) throw Error(ErrorCode::ShapeMismatch, "cannot reshape " + shape_string());
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

std::string Tensor::shape_string() const {
  std::string s = "[";
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape_[i]);
  }
  return s + "]";
}

}  // namespace skinlab::nn
