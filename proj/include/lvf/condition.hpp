#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "lvf/image.hpp"
#include "lvf/model.hpp"
#include "lvf/plan.hpp"

namespace lvf {

// Condition-image encoder: a small backbone-style transformer (no timestep
// modulation, no text path) plus one zero-initialized linear head per
// injection site of the plan it was built for.
struct ConditionAdapterParams {
  ModelConfig cfg;
  InjectionPlan plan;
  Tensor patch_w, patch_b;
  std::vector<BlockParams> blocks;  // only attention/ffn/norm fields are set
  std::vector<Tensor> site_w, site_b;
  ParamStore store;

  static ConditionAdapterParams init(const ModelConfig& cfg, const InjectionPlan& plan,
                                     uint64_t seed);
};

// Per-slot linear maps from raw patch tokens to hidden features, two per
// in-context pair (lq and hq separately), all zero at init.
struct IclProjectors {
  std::vector<Tensor> w;  // [patch_dim, hidden]
  std::vector<Tensor> b;  // [hidden]
  ParamStore store;

  static IclProjectors init(const ModelConfig& cfg);
};

struct PromptPack {
  std::vector<int64_t> instr_ids;
  std::vector<std::pair<Image, Image>> icl_pairs;  // (exemplar lq, exemplar hq)
  FusionMode fusion = FusionMode::ProjectionAddition;

  void validate(const ModelConfig& cfg) const;
};

// One transformer block without timestep modulation: x + postnorm(attn(prenorm))
// then the same pattern for the FFN.
Tensor adapter_block(const TokenGrid& g, const BlockParams& bp, const ModelConfig& cfg);

// Runs the adapter trunk over the patchified condition image and applies each
// site head. Rejects InputConcat plans (that variant bypasses the adapter).
std::vector<Tensor> encode_condition(const Tensor& cond, const ConditionAdapterParams& A);

// Eq-style token concatenation: prompts appended below the image segment,
// keeping their own (pre-offset) rope positions.
TokenGrid fuse_icl_concat(const TokenGrid& h_img, const std::vector<TokenGrid>& prompts);

// Additive fusion: h_img + sum_i projector_i(prompt_i), tokenwise. Prompts are
// raw patch grids; projector slot i handles prompt i.
TokenGrid fuse_icl_projection_addition(const TokenGrid& h_img,
                                       const std::vector<TokenGrid>& prompts,
                                       const IclProjectors& proj);

// Full conditional forward for one sample: fuses in-context prompts, encodes
// the condition image per the plan, and runs the backbone.
Tensor conditional_velocity(const DiTParams& P, const ConditionAdapterParams& A,
                            const IclProjectors& proj, const InjectionPlan& plan,
                            const Tensor& x_t, double t, const Tensor& cond,
                            const PromptPack& prompt, ForwardTrace* trace = nullptr);

// Marks which parameter sets the plan trains (variant (b) freezes the
// backbone; the adapter and projectors always train).
void set_trainable(const InjectionPlan& plan, DiTParams& P, ConditionAdapterParams& A,
                   IclProjectors& proj);

// Binds plan + condition + prompts into a velocity closure and applies the
// plan's trainability marking.
using VelocityFn = std::function<Tensor(const Tensor& x_t, double t)>;
VelocityFn apply_plan(DiTParams& P, ConditionAdapterParams& A, IclProjectors& proj,
                      const InjectionPlan& plan, const Tensor& cond,
                      const PromptPack& prompt);

}  // namespace lvf
