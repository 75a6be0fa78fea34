#include "lvf/optim.hpp"

#include <cmath>

#include "lvf/error.hpp"

namespace lvf {

void AdamState::init_for(const std::vector<Tensor>& params) {
  m.clear();
  v.clear();
  step = 0;
  for (const auto& p : params) {
    m.emplace_back(static_cast<size_t>(p.size()), 0.0);
    v.emplace_back(static_cast<size_t>(p.size()), 0.0);
  }
}

bool AdamState::matches(const std::vector<Tensor>& params) const {
  if (m.size() != params.size() || v.size() != params.size()) return false;
  for (size_t i = 0; i < params.size(); ++i)
    if (m[i].size() != static_cast<size_t>(params[i].size()) ||
        v[i].size() != static_cast<size_t>(params[i].size()))
      return false;
  return true;
}

double clip_gradients(const std::vector<Tensor>& params, double max_norm) {
  if (max_norm <= 0.0) throw ContractError("clip norm must be positive");
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (double g : const_cast<Tensor&>(p).grad()) sq += g * g;
  }
  double norm = std::sqrt(sq);
  if (norm > max_norm) {
    double s = max_norm / norm;
    for (const auto& p : params) {
      if (!p.has_grad()) continue;
      for (double& g : const_cast<Tensor&>(p).grad()) g *= s;
    }
  }
  return norm;
}

void adamw_step(const std::vector<Tensor>& params, AdamState& state,
                const OptimConfig& cfg) {
  if (!state.matches(params))
    throw ContractError("optimizer state does not match the parameter list");
  if (cfg.grad_clip > 0.0) clip_gradients(params, cfg.grad_clip);
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = const_cast<Tensor&>(params[i]);
    // Params with no gradient buffer at all (e.g. frozen) are left untouched,
    // moments included.  A buffer of explicit zeros still decays the moments.
    if (!p.has_grad()) continue;
    auto& w = p.data();
    auto& mi = state.m[i];
    auto& vi = state.v[i];
    const auto& gv = p.grad();
    for (size_t k = 0; k < w.size(); ++k) {
      double g = gv[k];
      mi[k] = cfg.beta1 * mi[k] + (1.0 - cfg.beta1) * g;
      vi[k] = cfg.beta2 * vi[k] + (1.0 - cfg.beta2) * g * g;
      double mhat = mi[k] / bc1;
      double vhat = vi[k] / bc2;
      w[k] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * w[k]);
    }
  }
}

}  // namespace lvf
