#pragma once

#include <vector>

#include "skinlab/nn/layers.hpp"

namespace skinlab::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over the trainable parameters present at construction.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamConfig config);

  void step();
  long steps() const { return t_; }
  const AdamConfig& config() const { return config_; }

 private:
  struct Slot {
    Parameter* param;
    std::vector<float> m, v;
  };
  std::vector<Slot> slots_;
  AdamConfig config_;
  long t_ = 0;
};

}  // namespace skinlab::nn
