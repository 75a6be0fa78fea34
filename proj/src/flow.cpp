#include "lvf/flow.hpp"

#include <cmath>

#include "lvf/error.hpp"
#include "lvf/rng.hpp"

namespace lvf {

Tensor sample_path(const Tensor& x0, const Tensor& x1, double t) {
  if (x0.shape() != x1.shape())
    throw ShapeError("path endpoints differ: " + shape_str(x0.shape()) + " vs " +
                     shape_str(x1.shape()));
  if (!(t >= 0.0 && t <= 1.0))
    throw ContractError("path time " + std::to_string(t) + " outside [0,1]");
  if (t == 0.0) return x0;
  if (t == 1.0) return x1;
  return add(scale(x0, 1.0 - t), scale(x1, t));
}

FlowDraw cfm_draw(uint64_t seed, int64_t sample_index, const Shape& shape) {
  Rng rng(mix_seed(seed, static_cast<uint64_t>(sample_index)));
  FlowDraw d;
  d.t = rng.uniform();
  std::vector<double> noise(static_cast<size_t>(shape_size(shape)));
  for (auto& v : noise) v = rng.normal();
  d.x0 = Tensor::from_data(shape, std::move(noise));
  return d;
}

Tensor sample_noise(uint64_t seed, const Shape& shape) {
  Rng rng(mix_seed(seed, 0x6e6f6973, 0));  // dedicated stream for start noise
  std::vector<double> noise(static_cast<size_t>(shape_size(shape)));
  for (auto& v : noise) v = rng.normal();
  return Tensor::from_data(shape, std::move(noise));
}

CfmLossOut cfm_loss(const CondVelocityFn& model, const std::vector<FlowSample>& batch,
                    uint64_t seed) {
  if (batch.empty()) throw ContractError("cfm loss over an empty batch");
  CfmLossOut out;
  Tensor acc;
  for (size_t i = 0; i < batch.size(); ++i) {
    const FlowSample& s = batch[i];
    FlowDraw d = cfm_draw(seed, static_cast<int64_t>(i), s.x1.shape());
    out.ts.push_back(d.t);
    Tensor x_t = sample_path(d.x0, s.x1, d.t);
    Tensor target = sub(s.x1, d.x0);  // constant along the straight path
    Tensor err = sub(model(x_t, d.t, s), target);
    Tensor sample_loss = mean_all(mul(err, err));
    acc = acc.defined() ? add(acc, sample_loss) : sample_loss;
  }
  out.loss = scale(acc, 1.0 / static_cast<double>(batch.size()));
  return out;
}

Tensor euler_sample(const VelocityField& velocity, const Shape& shape, int64_t steps,
                    uint64_t seed) {
  if (steps < 1) throw ContractError("euler sampler needs steps >= 1");
  NoGrad inference;
  Tensor x = sample_noise(seed, shape);
  const double h = 1.0 / static_cast<double>(steps);
  for (int64_t k = 0; k < steps; ++k) {
    Tensor u = velocity(x, static_cast<double>(k) * h);
    x = add(x, scale(u, h));
    for (double v : x.data())
      if (!std::isfinite(v))
        throw NumericError("sampler diverged at step " + std::to_string(k) + " of " +
                           std::to_string(steps));
  }
  Tensor clamped = x.clone();
  for (auto& v : clamped.data()) v = std::min(1.0, std::max(-1.0, v));
  return clamped;
}

}  // namespace lvf
