#pragma once

#include <cstdint>
#include <vector>

#include "lvf/tensor.hpp"

namespace lvf {

struct OptimConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 0.0;  // 0 disables clipping
};

// First/second moment buffers aligned positionally with the parameter list.
struct AdamState {
  std::vector<std::vector<double>> m, v;
  int64_t step = 0;

  void init_for(const std::vector<Tensor>& params);
  bool matches(const std::vector<Tensor>& params) const;
};

// Global-norm clip: if ||g||_2 > max_norm, every gradient is scaled by
// max_norm/||g||. Returns the pre-clip norm. Parameters without gradients
// contribute zero.
double clip_gradients(const std::vector<Tensor>& params, double max_norm);

// Decoupled-weight-decay adaptive update with bias correction. Clipping (if
// configured) is applied to the gradients first. Parameters whose grads were
// never touched this step are treated as zero-gradient.
void adamw_step(const std::vector<Tensor>& params, AdamState& state,
                const OptimConfig& cfg);

}  // namespace lvf
