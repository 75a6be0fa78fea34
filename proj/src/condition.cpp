#include "lvf/condition.hpp"

#include <string>

#include "lvf/error.hpp"

namespace lvf {

namespace {

Tensor randn(Rng rng, Shape shape, double stddev) {
  std::vector<double> d(static_cast<size_t>(shape_size(shape)));
  for (auto& v : d) v = rng.normal(0.0, stddev);
  return Tensor::from_data(std::move(shape), std::move(d));
}

}  // namespace

ConditionAdapterParams ConditionAdapterParams::init(const ModelConfig& cfg,
                                                    const InjectionPlan& plan,
                                                    uint64_t seed) {
  cfg.validate();
  plan.validate();
  ConditionAdapterParams A;
  A.cfg = cfg;
  A.plan = plan;
  Rng root(seed);
  const int64_t h = cfg.hidden_dim;
  const int64_t pd = cfg.patch_dim();
  const int64_t fd = cfg.ffn_dim();
  const double sd = 0.02;

  A.patch_w = A.store.add("adapter.patch_w", randn(root.child(1, 0), {pd, h}, sd));
  A.patch_b = A.store.add("adapter.patch_b", Tensor::zeros({h}));
  for (int64_t b = 0; b < cfg.adapter_depth; ++b) {
    BlockParams bp;
    Rng br = root.child(2, static_cast<uint64_t>(b));
    auto name = [&](const char* s) {
      return "adapter.blk" + std::to_string(b) + "." + s;
    };
    bp.wq = A.store.add(name("wq"), randn(br.child(0), {h, h}, sd));
    bp.wk = A.store.add(name("wk"), randn(br.child(1), {h, h}, sd));
    bp.wv = A.store.add(name("wv"), randn(br.child(2), {h, h}, sd));
    bp.wo = A.store.add(name("wo"), randn(br.child(3), {h, h}, sd));
    bp.q_gain = A.store.add(name("q_gain"), Tensor::full({cfg.head_dim()}, 1.0));
    bp.k_gain = A.store.add(name("k_gain"), Tensor::full({cfg.head_dim()}, 1.0));
    bp.norm_attn_pre = A.store.add(name("norm_attn_pre"), Tensor::full({h}, 1.0));
    bp.norm_attn_post = A.store.add(name("norm_attn_post"), Tensor::full({h}, 1.0));
    bp.norm_ffn_pre = A.store.add(name("norm_ffn_pre"), Tensor::full({h}, 1.0));
    bp.norm_ffn_post = A.store.add(name("norm_ffn_post"), Tensor::full({h}, 1.0));
    bp.ffn_w1 = A.store.add(name("ffn_w1"), randn(br.child(4), {h, fd}, sd));
    bp.ffn_b1 = A.store.add(name("ffn_b1"), Tensor::zeros({fd}));
    bp.ffn_w2 = A.store.add(name("ffn_w2"), randn(br.child(5), {fd, h}, sd));
    bp.ffn_b2 = A.store.add(name("ffn_b2"), Tensor::zeros({h}));
    A.blocks.push_back(bp);
  }
  const size_t n_sites = plan.sites(cfg.num_blocks).size();
  for (size_t s = 0; s < n_sites; ++s) {
    // Zero heads: injected features vanish at step 0 regardless of the trunk.
    A.site_w.push_back(
        A.store.add("adapter.site" + std::to_string(s) + ".w", Tensor::zeros({h, h})));
    A.site_b.push_back(
        A.store.add("adapter.site" + std::to_string(s) + ".b", Tensor::zeros({h})));
  }
  return A;
}

IclProjectors IclProjectors::init(const ModelConfig& cfg) {
  cfg.validate();
  IclProjectors p;
  for (int64_t i = 0; i < 2 * cfg.max_icl_pairs; ++i) {
    p.w.push_back(p.store.add("icl.proj" + std::to_string(i) + ".w",
                              Tensor::zeros({cfg.patch_dim(), cfg.hidden_dim})));
    p.b.push_back(p.store.add("icl.proj" + std::to_string(i) + ".b",
                              Tensor::zeros({cfg.hidden_dim})));
  }
  return p;
}

void PromptPack::validate(const ModelConfig& cfg) const {
  if (static_cast<int64_t>(icl_pairs.size()) > cfg.max_icl_pairs)
    throw ContractError("prompt has " + std::to_string(icl_pairs.size()) +
                        " in-context pairs, config allows " +
                        std::to_string(cfg.max_icl_pairs));
  for (int64_t id : instr_ids)
    if (id < 0 || id >= cfg.instr_vocab_size)
      throw ContractError("instruction token id " + std::to_string(id) +
                          " outside vocabulary of " +
                          std::to_string(cfg.instr_vocab_size));
}

Tensor adapter_block(const TokenGrid& g, const BlockParams& bp, const ModelConfig& cfg) {
  Tensor x = g.tokens;
  Tensor h = rms_norm(x, bp.norm_attn_pre, 1, 1e-6);
  TokenGrid hg{h, g.positions, g.rows, g.cols};
  Tensor a = rms_norm(attention(hg, bp, cfg), bp.norm_attn_post, 1, 1e-6);
  x = add(x, a);
  h = rms_norm(x, bp.norm_ffn_pre, 1, 1e-6);
  Tensor f = add(matmul(silu(add(matmul(h, bp.ffn_w1), bp.ffn_b1)), bp.ffn_w2),
                 bp.ffn_b2);
  return add(x, rms_norm(f, bp.norm_ffn_post, 1, 1e-6));
}

std::vector<Tensor> encode_condition(const Tensor& cond, const ConditionAdapterParams& A) {
  if (A.plan.variant == Variant::InputConcat)
    throw ContractError(
        "input-concat plans bypass the adapter; encode_condition has no sites");
  const ModelConfig& cfg = A.cfg;
  const int64_t g = cfg.grid_side();
  TokenGrid grid;
  grid.tokens = add(matmul(patchify_raw(cond, cfg.patch_size), A.patch_w), A.patch_b);
  grid.positions = grid_positions(g, g);
  grid.rows = g;
  grid.cols = g;
  for (const auto& bp : A.blocks) grid.tokens = adapter_block(grid, bp, cfg);
  std::vector<Tensor> feats;
  feats.reserve(A.site_w.size());
  for (size_t s = 0; s < A.site_w.size(); ++s)
    feats.push_back(add(matmul(grid.tokens, A.site_w[s]), A.site_b[s]));
  return feats;
}

TokenGrid fuse_icl_concat(const TokenGrid& h_img, const std::vector<TokenGrid>& prompts) {
  if (prompts.empty()) return h_img;
  std::vector<Tensor> parts = {h_img.tokens};
  TokenGrid out;
  out.positions = h_img.positions;
  for (const auto& p : prompts) {
    if (p.tokens.dim(1) != h_img.tokens.dim(1))
      throw ContractError("prompt token width " + std::to_string(p.tokens.dim(1)) +
                          " does not match image token width " +
                          std::to_string(h_img.tokens.dim(1)));
    parts.push_back(p.tokens);
    out.positions.insert(out.positions.end(), p.positions.begin(), p.positions.end());
  }
  out.tokens = concat_rows(parts);
  out.rows = h_img.rows;
  out.cols = h_img.cols;
  return out;
}

TokenGrid fuse_icl_projection_addition(const TokenGrid& h_img,
                                       const std::vector<TokenGrid>& prompts,
                                       const IclProjectors& proj) {
  if (prompts.size() > proj.w.size())
    throw ContractError("got " + std::to_string(prompts.size()) +
                        " prompt grids for " + std::to_string(proj.w.size()) +
                        " projector slots");
  TokenGrid out = h_img;
  for (size_t i = 0; i < prompts.size(); ++i) {
    if (prompts[i].tokens.dim(0) != h_img.tokens.dim(0))
      throw ContractError("prompt grid " + std::to_string(i) + " has " +
                          std::to_string(prompts[i].tokens.dim(0)) +
                          " tokens, image has " +
                          std::to_string(h_img.tokens.dim(0)));
    out.tokens = add(out.tokens,
                     add(matmul(prompts[i].tokens, proj.w[i]), proj.b[i]));
  }
  return out;
}

namespace {

// raw patch grid of an exemplar image in the signed pixel domain
TokenGrid raw_prompt_grid(const ModelConfig& cfg, const Image& img, int64_t row_offset) {
  TokenGrid g;
  g.tokens = patchify_raw(signed_from_image(img), cfg.patch_size);
  g.positions = grid_positions(cfg.grid_side(), cfg.grid_side(), row_offset);
  g.rows = cfg.grid_side();
  g.cols = cfg.grid_side();
  return g;
}

}  // namespace

Tensor conditional_velocity(const DiTParams& P, const ConditionAdapterParams& A,
                            const IclProjectors& proj, const InjectionPlan& plan,
                            const Tensor& x_t, double t, const Tensor& cond,
                            const PromptPack& prompt, ForwardTrace* trace) {
  const ModelConfig& cfg = P.cfg;
  prompt.validate(cfg);

  TokenGrid grid;
  std::vector<Tensor> feats;
  if (plan.variant == Variant::InputConcat) {
    // split-sum embed: [x | cond] through [patch_w ; cond_patch_w]
    Tensor tok = add(add(matmul(patchify_raw(x_t, cfg.patch_size), P.patch_w),
                         matmul(patchify_raw(cond, cfg.patch_size), P.cond_patch_w)),
                     P.patch_b);
    const int64_t g = cfg.grid_side();
    grid = TokenGrid{tok, grid_positions(g, g), g, g};
    if (trace) trace->input_concat_used = true;
  } else {
    grid = embed_image(P, x_t);
    feats = encode_condition(cond, A);
  }

  if (!prompt.icl_pairs.empty()) {
    const int64_t g = cfg.grid_side();
    if (prompt.fusion == FusionMode::Concat) {
      std::vector<TokenGrid> embedded;
      for (size_t k = 0; k < prompt.icl_pairs.size(); ++k) {
        // exemplars stack vertically below the image: disjoint row offsets
        for (int side = 0; side < 2; ++side) {
          const Image& im =
              side == 0 ? prompt.icl_pairs[k].first : prompt.icl_pairs[k].second;
          TokenGrid eg = embed_image(P, signed_from_image(im));
          eg.positions =
              grid_positions(g, g, g * static_cast<int64_t>(2 * k + side + 1));
          embedded.push_back(eg);
        }
      }
      grid = fuse_icl_concat(grid, embedded);
    } else {
      std::vector<TokenGrid> raw;
      for (size_t k = 0; k < prompt.icl_pairs.size(); ++k) {
        raw.push_back(raw_prompt_grid(cfg, prompt.icl_pairs[k].first, 0));
        raw.push_back(raw_prompt_grid(cfg, prompt.icl_pairs[k].second, 0));
      }
      grid = fuse_icl_projection_addition(grid, raw, proj);
    }
  }

  return dit_forward(P, grid, t, prompt.instr_ids, feats, plan, trace);
}

void set_trainable(const InjectionPlan& plan, DiTParams& P, ConditionAdapterParams& A,
                   IclProjectors& proj) {
  for (auto& it : P.store.items) it.second.set_requires_grad(plan.train_backbone);
  for (auto& it : A.store.items) it.second.set_requires_grad(true);
  for (auto& it : proj.store.items) it.second.set_requires_grad(true);
}

VelocityFn apply_plan(DiTParams& P, ConditionAdapterParams& A, IclProjectors& proj,
                      const InjectionPlan& plan, const Tensor& cond,
                      const PromptPack& prompt) {
  if (A.plan.variant != plan.variant)
    throw ContractError("adapter was built for plan '" + std::string(A.plan.name()) +
                        "', forward requested '" + plan.name() + "'");
  set_trainable(plan, P, A, proj);
  return [&P, &A, &proj, plan, cond, prompt](const Tensor& x_t, double t) {
    return conditional_velocity(P, A, proj, plan, x_t, t, cond, prompt);
  };
}

}  // namespace lvf
