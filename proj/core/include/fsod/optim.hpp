#pragma once

#include <vector>

#include "fsod/param.hpp"

namespace fsod {

struct OptimConfig {
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const;  // throws on out-of-range values
};

// One AdamW update over the given params. Decoupled weight decay is applied
// independently of the adaptive term; bias correction enabled. Params with
// trainable=false are left bitwise untouched. A trainable param without a
// gradient is an error.
void adamw_step(const std::vector<Param*>& params, const OptimConfig& cfg);

}  // namespace fsod
