#include <cmath>
#include <functional>
#include <memory>

#include "doctest.h"
#include "skinlab/error.hpp"
#include "skinlab/nn/container.hpp"
#include "skinlab/nn/layers.hpp"
#include "skinlab/nn/optim.hpp"
#include "skinlab/rng.hpp"

using namespace skinlab;
using namespace skinlab::nn;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, float scale = 1.0f) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<float>(rng.normal()) * scale;
  return t;
}

void randomize(Layer& layer, Rng& rng, float scale = 0.5f) {
  for (auto& nt : named_tensors(layer))
    if (nt.param)
      for (auto& v : nt.tensor->values()) v = static_cast<float>(rng.normal()) * scale + (nt.name.ends_with("weight") ? 0.0f : 0.0f);
}

double weighted_sum(const Tensor& y, const Tensor& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.numel(); ++i) s += static_cast<double>(y[i]) * r[i];
  return s;
}

// Central-difference oracle for d(sum r*f(x))/dx and d/dparams, compared with
// the layer's analytic backward.
void check_gradients(Layer& layer, const Tensor& x, double tol = 2e-2, std::uint64_t dropout_seed = 0) {
  Rng rng(99);
  layer.reseed(dropout_seed);
  Tensor y = layer.forward(x, Mode::Train);
  Tensor r = random_tensor(y.shape(), rng);
  zero_grad(layer);
  Tensor dx = layer.backward(r);

  auto loss = [&](const Tensor& input) {
    layer.reseed(dropout_seed);
    return weighted_sum(layer.forward(input, Mode::Train), r);
  };
  const float eps = 1e-2f;
  double max_err = 0.0, max_ref = 1e-3;
  Tensor xp = x;
  for (std::size_t i = 0; i < x.numel(); i += std::max<std::size_t>(1, x.numel() / 40)) {
    const float orig = xp[i];
    xp[i] = orig + eps;
    const double up = loss(xp);
    xp[i] = orig - eps;
    const double down = loss(xp);
    xp[i] = orig;
    const double fd = (up - down) / (2.0 * eps);
    max_err = std::max(max_err, std::abs(fd - dx[i]));
    max_ref = std::max(max_ref, std::abs(fd));
  }
  CHECK(max_err / max_ref < tol);

  for (auto& nt : named_tensors(layer)) {
    if (!nt.param) continue;
    Tensor& w = *nt.tensor;
    const Tensor grad = nt.param->grad;
    double perr = 0.0, pref = 1e-3;
    for (std::size_t i = 0; i < w.numel(); i += std::max<std::size_t>(1, w.numel() / 25)) {
      const float orig = w[i];
      w[i] = orig + eps;
      const double up = loss(x);
      w[i] = orig - eps;
      const double down = loss(x);
      w[i] = orig;
      const double fd = (up - down) / (2.0 * eps);
      perr = std::max(perr, std::abs(fd - grad[i]));
      pref = std::max(pref, std::abs(fd));
    }
    INFO(nt.name);
    CHECK(perr / pref < tol);
  }
}

}  // namespace

TEST_CASE("linear gradients match finite differences") {
  Rng rng(1);
  Linear layer(5, 4);
  randomize(layer, rng);
  check_gradients(layer, random_tensor({3, 5}, rng));
}

TEST_CASE("conv2d gradients match finite differences") {
  Rng rng(2);
  SUBCASE("strided padded") {
    Conv2d layer(2, 3, {4, 2, 1});
    randomize(layer, rng);
    check_gradients(layer, random_tensor({2, 2, 8, 8}, rng));
  }
  SUBCASE("pointwise") {
    Conv2d layer(3, 2, {1, 1, 0}, false);
    randomize(layer, rng);
    check_gradients(layer, random_tensor({2, 3, 5, 5}, rng));
  }
  SUBCASE("3x3 same") {
    Conv2d layer(2, 2, {3, 1, 1});
    randomize(layer, rng);
    check_gradients(layer, random_tensor({1, 2, 6, 7}, rng));
  }
}

TEST_CASE("conv transpose gradients match finite differences and output size doubles") {
  Rng rng(3);
  ConvTranspose2d layer(3, 2, {4, 2, 1});
  randomize(layer, rng);
  Tensor x = random_tensor({2, 3, 4, 4}, rng);
  CHECK(layer.forward(x, Mode::Eval).shape() == std::vector<int>{2, 2, 8, 8});
  check_gradients(layer, x);
}

TEST_CASE("conv transpose is the adjoint of conv") {
  // <conv(x), y> == <x, convT(y)> when both share the same kernel tensor.
  Rng rng(4);
  Conv2d conv(3, 5, {4, 2, 1}, false);
  ConvTranspose2d convt(5, 3, {4, 2, 1}, false);
  randomize(conv, rng);
  // conv weight is [out=5, in=3, k, k]; transposed weight is [in=5, out=3, k, k]: same layout.
  convt.weight().value = conv.weight().value;
  Tensor x = random_tensor({1, 3, 8, 8}, rng);
  Tensor y = random_tensor({1, 5, 4, 4}, rng);
  const double lhs = weighted_sum(conv.forward(x, Mode::Eval), y);
  const double rhs = weighted_sum(convt.forward(y, Mode::Eval), x);
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-4));
}

TEST_CASE("batch norm gradients and statistics") {
  Rng rng(5);
  BatchNorm bn(3);
  randomize(bn, rng);
  Tensor x = random_tensor({4, 3, 3, 3}, rng, 2.0f);
  check_gradients(bn, x);

  SUBCASE("rank-2 input") {
    BatchNorm bn2(4);
    check_gradients(bn2, random_tensor({5, 4}, rng));
  }
  SUBCASE("eval uses running statistics") {
    BatchNorm fresh(3);
    Tensor y = fresh.forward(x, Mode::Eval);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == doctest::Approx(x[i] / std::sqrt(1.0f + 1e-5f)));
  }
}

TEST_CASE("activations, pooling and dropout gradients") {
  Rng rng(6);
  Tensor x = random_tensor({2, 3, 4, 4}, rng);
  for (auto kind : {ActivationKind::LeakyReLU, ActivationKind::Tanh, ActivationKind::Sigmoid}) {
    Activation a(kind);
    check_gradients(a, x);
  }
  GlobalAvgPool gap;
  check_gradients(gap, x);
  MaxPool2d pool({3, 2, 1});
  check_gradients(pool, x);
  Dropout drop(0.3f);
  check_gradients(drop, random_tensor({4, 10}, rng), 2e-2, 7);
}

TEST_CASE("residual block gradients") {
  Rng rng(7);
  auto main = std::make_unique<Sequential>();
  main->emplace<Conv2d>("conv1", 2, 4, ConvGeometry{3, 2, 1}, false);
  main->emplace<BatchNorm>("bn1", 4);
  main->emplace<Activation>("relu", ActivationKind::ReLU);
  main->emplace<Conv2d>("conv2", 4, 4, ConvGeometry{3, 1, 1}, false);
  auto down = std::make_unique<Sequential>();
  down->emplace<Conv2d>("0", 2, 4, ConvGeometry{1, 2, 0}, false);
  Residual block(std::move(main), std::move(down));
  randomize(block, rng, 0.3f);
  check_gradients(block, random_tensor({3, 2, 6, 6}, rng), 5e-2);

  auto names = named_tensors(block, "layer1.0.");
  CHECK(names.front().name == "layer1.0.conv1.weight");
  CHECK(names.back().name == "layer1.0.downsample.0.weight");
}

TEST_CASE("adam matches a hand-computed first step") {
  Linear layer(1, 1, false);
  layer.weight().value[0] = 1.0f;
  Adam opt(parameters(layer), {.lr = 0.1});
  layer.weight().grad[0] = 4.0f;
  opt.step();
  // m_hat = g, v_hat = g^2 -> step = lr * g/|g|.
  CHECK(layer.weight().value[0] == doctest::Approx(0.9).epsilon(1e-6));
}

TEST_CASE("frozen parameters are not updated") {
  Linear layer(2, 2);
  set_trainable(layer, false);
  Adam opt(parameters(layer), {.lr = 0.1});
  const auto before = weights_checksum(layer);
  for (auto* p : parameters(layer)) p->grad.fill(1.0f);
  opt.step();
  CHECK(weights_checksum(layer) == before);
  CHECK(count_parameters(layer, true) == 0);
  CHECK(count_parameters(layer, false) == 6);
}

TEST_CASE("container round trip is bitwise") {
  Rng rng(8);
  Sequential net;
  net.emplace<Conv2d>("conv", 3, 4, ConvGeometry{3, 1, 1});
  net.emplace<BatchNorm>("bn", 4);
  randomize(net, rng);
  Container c;
  c.header = {{"schema_version", 1}, {"kind", "test"}};
  c.tensors = export_weights(net);
  const auto decoded = decode_container(encode_container(c));
  CHECK(decoded.header.at("kind") == "test");
  Sequential other;
  other.emplace<Conv2d>("conv", 3, 4, ConvGeometry{3, 1, 1});
  other.emplace<BatchNorm>("bn", 4);
  import_weights(other, decoded.tensors);
  CHECK(weights_checksum(other) == weights_checksum(net));

  c.tensors.erase("bn.running_var");
  CHECK_THROWS_AS(import_weights(other, c.tensors), Error);
  CHECK_THROWS_AS(decode_container("garbage"), Error);
}
