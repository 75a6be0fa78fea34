#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lvf/condition.hpp"
#include "lvf/tensor.hpp"

namespace lvf {

struct LossRecord {
  int64_t step = 0;
  double loss = 0.0;
  std::string task_id;
  double t = 0.0;
};

// Straight-line path between noise and data: (1-t)*x0 + t*x1.
Tensor sample_path(const Tensor& x0, const Tensor& x1, double t);

struct FlowSample {
  Tensor x1;    // clean target, signed [-1,1]
  Tensor cond;  // degraded condition, signed [-1,1]
  PromptPack prompt;
  std::string task_id;
};

// Per-sample draw for the objective: t first, then the noise tensor, from the
// stream mix(seed, sample_index). Exposed so tests and parallel workers can
// reproduce the exact draws.
struct FlowDraw {
  double t;
  Tensor x0;
};
FlowDraw cfm_draw(uint64_t seed, int64_t sample_index, const Shape& shape);

// Noise used as the sampler start point.
Tensor sample_noise(uint64_t seed, const Shape& shape);

using CondVelocityFn =
    std::function<Tensor(const Tensor& x_t, double t, const FlowSample&)>;

struct CfmLossOut {
  Tensor loss;             // rank-0, mean squared error against x1 - x0
  std::vector<double> ts;  // the t drawn for each sample
};

CfmLossOut cfm_loss(const CondVelocityFn& model, const std::vector<FlowSample>& batch,
                    uint64_t seed);

// Euler integration of dx/dt = u(t, x) from t=0 noise to t=1, fixed grid
// t_k = k/steps; the result is clamped to [-1,1] only after the last step.
using VelocityField = std::function<Tensor(const Tensor& x, double t)>;
Tensor euler_sample(const VelocityField& velocity, const Shape& shape, int64_t steps,
                    uint64_t seed);

}  // namespace lvf
