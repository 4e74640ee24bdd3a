#include "skinlab/nn/optim.hpp"

#include <cmath>

#include "skinlab/error.hpp"

namespace skinlab::nn {

Adam::Adam(std::vector<Parameter*> params, AdamConfig config) : config_(config) {
  if (!(config.lr > 0.0)) throw Error(ErrorCode::BadSpec, "learning rate must be positive");
  for (Parameter* p : params)
    if (p->trainable) slots_.push_back({p, std::vector<float>(p->value.numel()), std::vector<float>(p->value.numel())});
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  const auto b1 = static_cast<float>(config_.beta1);
  const auto b2 = static_cast<float>(config_.beta2);
  const auto step_size = static_cast<float>(config_.lr / bc1);
  const auto inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
  const auto eps = static_cast<float>(config_.eps);
  for (Slot& s : slots_) {
    float* w = s.param->value.data();
    const float* g = s.param->grad.data();
    for (std::size_t i = 0; i < s.m.size(); ++i) {
      s.m[i] = b1 * s.m[i] + (1.0f - b1) * g[i];
      s.v[i] = b2 * s.v[i] + (1.0f - b2) * g[i] * g[i];
      w[i] -= step_size * s.m[i] / (std::sqrt(s.v[i]) * inv_sqrt_bc2 + eps);
    }
  }
}

}  // namespace skinlab::nn
