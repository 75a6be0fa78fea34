#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "lvf/condition.hpp"
#include "lvf/degrade.hpp"
#include "lvf/rng.hpp"
#include "util.hpp"

using namespace lvf;
using namespace lvf::test;

namespace {

ModelConfig pipe_cfg() {
  ModelConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.hidden_dim = 8;
  c.num_heads = 2;
  c.num_blocks = 4;
  c.instr_vocab_size = 8;
  c.max_icl_pairs = 2;
  return c;
}

Image rand_image(Rng& rng, int64_t size) {
  Image im(3, size, size);
  for (auto& v : im.pix) v = rng.uniform();
  return im;
}

TokenGrid rand_grid(Rng& rng, int64_t n, int64_t width, int64_t rows, int64_t cols,
                    int64_t row_offset = 0) {
  TokenGrid g;
  g.tokens = rand_t(rng, {n, width});
  g.positions = grid_positions(rows, cols, row_offset);
  g.rows = rows;
  g.cols = cols;
  return g;
}

}  // namespace

TEST_CASE("adapter init: zero heads, plan-shaped site list, determinism") {
  ModelConfig cfg = pipe_cfg();
  cfg.num_blocks = 8;
  auto plan = InjectionPlan::make(Variant::FirstHalf);
  ConditionAdapterParams A = ConditionAdapterParams::init(cfg, plan, 5);
  CHECK(A.blocks.size() == 2);  // adapter_depth default
  CHECK(A.site_w.size() == 4);  // FirstHalf on 8 blocks -> 4 sites
  for (size_t s = 0; s < A.site_w.size(); ++s) {
    for (double v : A.site_w[s].data()) CHECK(v == 0.0);
    for (double v : A.site_b[s].data()) CHECK(v == 0.0);
  }

  ConditionAdapterParams B = ConditionAdapterParams::init(cfg, plan, 5);
  for (size_t i = 0; i < A.store.items.size(); ++i)
    CHECK(same_values(A.store.items[i].second, B.store.items[i].second));

  cfg.adapter_depth = 3;
  CHECK(ConditionAdapterParams::init(cfg, plan, 5).blocks.size() == 3);

  auto interval = InjectionPlan::make(Variant::Interval);
  CHECK(ConditionAdapterParams::init(pipe_cfg(), interval, 5).site_w.size() == 2);
}

TEST_CASE("encode_condition: zero features at init, correct count") {
  ModelConfig cfg = pipe_cfg();
  auto plan = InjectionPlan::make(Variant::SecondHalf);
  ConditionAdapterParams A = ConditionAdapterParams::init(cfg, plan, 9);
  Rng rng(10);
  Tensor cond = rand_t(rng, {3, 16, 16});
  auto feats = encode_condition(cond, A);
  REQUIRE(feats.size() == 2);
  for (auto& f : feats) {
    CHECK(f.shape() == Shape{cfg.n_tokens(), cfg.hidden_dim});
    for (double v : f.data()) CHECK(v == 0.0);
  }

  auto input_plan = InjectionPlan::make(Variant::InputConcat);
  ConditionAdapterParams AI = ConditionAdapterParams::init(cfg, input_plan, 9);
  CHECK_THROWS_AS(encode_condition(cond, AI), ContractError);
}

TEST_CASE("adapter gradient check") {
  ModelConfig cfg = pipe_cfg();
  cfg.num_blocks = 2;
  auto plan = InjectionPlan::make(Variant::FirstHalf);
  ConditionAdapterParams A = ConditionAdapterParams::init(cfg, plan, 11);
  randomize_params(A.store, 12);

  Rng rng(13);
  Tensor cond = rand_t(rng, {3, 16, 16});
  Tensor w = rand_t(rng, {cfg.n_tokens(), cfg.hidden_dim});
  auto f = [&]() {
    auto feats = encode_condition(cond, A);
    Tensor s = dot_with(feats[0], w);
    return s;
  };
  CHECK(grad_check_params(f, A.store.tensors(), 1e-4) < 1e-4);
}

TEST_CASE("icl concat fusion") {
  Rng rng(21);
  TokenGrid img = rand_grid(rng, 64, 8, 8, 8);

  // empty prompt list is the identity
  TokenGrid same = fuse_icl_concat(img, {});
  CHECK(same_values(same.tokens, img.tokens));

  // 64-token image + 2 pairs of (64+64) -> 320 tokens
  std::vector<TokenGrid> prompts;
  for (int k = 0; k < 4; ++k) prompts.push_back(rand_grid(rng, 64, 8, 8, 8, 8 * (k + 1)));
  TokenGrid fused = fuse_icl_concat(img, prompts);
  CHECK(fused.tokens.dim(0) == 320);
  CHECK(fused.positions.size() == 320);
  CHECK(fused.rows * fused.cols == 64);  // image segment geometry preserved

  // segment slices are bitwise equal to the inputs
  {
    NoGrad ng;
    CHECK(same_values(slice_rows(fused.tokens, 0, 64), img.tokens));
    for (int k = 0; k < 4; ++k) {
      Tensor seg = slice_rows(fused.tokens, 64 * (k + 1), 64 * (k + 2));
      CHECK(same_values(seg, prompts[static_cast<size_t>(k)].tokens));
    }
  }
  // positions of the second segment carry the row offset
  CHECK(fused.positions[64][0] == 8);
  CHECK(fused.positions[64][1] == 0);

  TokenGrid bad = rand_grid(rng, 64, 6, 8, 8);
  CHECK_THROWS_AS(fuse_icl_concat(img, {bad}), ContractError);
}

TEST_CASE("icl projection-addition fusion") {
  ModelConfig cfg;
  cfg.image_size = 16;
  cfg.patch_size = 4;
  cfg.hidden_dim = 48;  // equals patch_dim so an identity projector exists
  cfg.num_heads = 2;
  cfg.num_blocks = 2;
  cfg.max_icl_pairs = 1;
  IclProjectors proj = IclProjectors::init(cfg);
  CHECK(proj.w.size() == 2);

  Rng rng(31);
  TokenGrid img = rand_grid(rng, 16, 48, 4, 4);
  TokenGrid p1 = rand_grid(rng, 16, 48, 4, 4);
  TokenGrid p2 = rand_grid(rng, 16, 48, 4, 4);

  // zero projectors and the empty list both reproduce h_img
  CHECK(same_values(fuse_icl_projection_addition(img, {}, proj).tokens, img.tokens));
  TokenGrid z = fuse_icl_projection_addition(img, {p1, p2}, proj);
  CHECK(z.tokens.dim(0) == 16);  // token count preserved
  CHECK(same_values(z.tokens, img.tokens));

  // identity projector in slot 0: output == h_img + prompt
  for (int64_t i = 0; i < 48; ++i) proj.w[0].data()[static_cast<size_t>(i * 48 + i)] = 1.0;
  TokenGrid one = fuse_icl_projection_addition(img, {p1}, proj);
  CHECK(max_abs_diff(one.tokens, add(img.tokens, p1.tokens)) == 0.0);

  TokenGrid short_grid = rand_grid(rng, 9, 48, 3, 3);
  CHECK_THROWS_AS(fuse_icl_projection_addition(img, {short_grid}, proj), ContractError);
  CHECK_THROWS_AS(fuse_icl_projection_addition(img, {p1, p2, p1}, proj), ContractError);
}

TEST_CASE("prompt pack validation") {
  ModelConfig cfg = pipe_cfg();
  Rng rng(41);
  PromptPack p;
  p.instr_ids = {0, 7};
  CHECK_NOTHROW(p.validate(cfg));
  p.instr_ids = {8};
  CHECK_THROWS_AS(p.validate(cfg), ContractError);
  p.instr_ids.clear();
  for (int k = 0; k < 3; ++k)
    p.icl_pairs.emplace_back(rand_image(rng, 16), rand_image(rng, 16));
  CHECK_THROWS_AS(p.validate(cfg), ContractError);
}

TEST_CASE("init transparency: conditional forward equals unconditional") {
  ModelConfig cfg = pipe_cfg();
  Rng rng(51);
  Tensor x_t = rand_t(rng, {3, 16, 16});
  Tensor cond = rand_t(rng, {3, 16, 16});
  PromptPack prompt;
  prompt.instr_ids = {1, 2};
  prompt.icl_pairs.emplace_back(rand_image(rng, 16), rand_image(rng, 16));
  prompt.fusion = FusionMode::ProjectionAddition;

  for (auto v : {Variant::InputConcat, Variant::FirstHalfFrozen, Variant::FirstHalf,
                 Variant::SecondHalf, Variant::Interval}) {
    auto plan = InjectionPlan::make(v);
    DiTParams P = DiTParams::init(cfg, 52);
    randomize_params(P.store, 53);
    // restore the condition-path zero inits the randomization overwrote
    for (auto& val : P.cond_patch_w.data()) val = 0.0;
    ConditionAdapterParams A = ConditionAdapterParams::init(cfg, plan, 54);
    IclProjectors proj = IclProjectors::init(cfg);

    Tensor uncond = dit_forward(P, embed_image(P, x_t), 0.3, prompt.instr_ids, {},
                                InjectionPlan::make(Variant::InputConcat));
    Tensor with_cond =
        conditional_velocity(P, A, proj, plan, x_t, 0.3, cond, prompt);
    CHECK(same_values(uncond, with_cond));
  }
}

TEST_CASE("strict init: every plan and fusion mode predicts the zero field") {
  ModelConfig cfg = pipe_cfg();
  Rng rng(61);
  Tensor x_t = rand_t(rng, {3, 16, 16});
  Tensor cond = rand_t(rng, {3, 16, 16});
  for (auto fusion : {FusionMode::Concat, FusionMode::ProjectionAddition}) {
    PromptPack prompt;
    prompt.instr_ids = {3};
    prompt.icl_pairs.emplace_back(rand_image(rng, 16), rand_image(rng, 16));
    prompt.fusion = fusion;
    for (auto v : {Variant::InputConcat, Variant::FirstHalf, Variant::Interval}) {
      auto plan = InjectionPlan::make(v);
      DiTParams P = DiTParams::init(cfg, 62);
      ConditionAdapterParams A = ConditionAdapterParams::init(cfg, plan, 63);
      IclProjectors proj = IclProjectors::init(cfg);
      Tensor out = conditional_velocity(P, A, proj, plan, x_t, 0.4, cond, prompt);
      for (double val : out.data()) CHECK(val == 0.0);
    }
  }
}

TEST_CASE("input-concat: zero condition image is invisible even when trained") {
  ModelConfig cfg = pipe_cfg();
  DiTParams P = DiTParams::init(cfg, 71);
  randomize_params(P.store, 72);  // cond_patch_w now nonzero
  ConditionAdapterParams A =
      ConditionAdapterParams::init(cfg, InjectionPlan::make(Variant::InputConcat), 73);
  IclProjectors proj = IclProjectors::init(cfg);
  Rng rng(74);
  Tensor x_t = rand_t(rng, {3, 16, 16});
  PromptPack prompt;

  auto plan = InjectionPlan::make(Variant::InputConcat);
  Tensor uncond = dit_forward(P, embed_image(P, x_t), 0.2, {}, {}, plan);
  Tensor with_zero_cond = conditional_velocity(P, A, proj, plan, x_t, 0.2,
                                               Tensor::zeros({3, 16, 16}), prompt);
  CHECK(same_values(uncond, with_zero_cond));

  // and a nonzero condition image is visible
  Tensor with_cond =
      conditional_velocity(P, A, proj, plan, x_t, 0.2, rand_t(rng, {3, 16, 16}), prompt);
  CHECK(max_abs_diff(uncond, with_cond) > 1e-12);
}

TEST_CASE("frozen variant: backbone gradients stay empty, adapter gradients flow") {
  ModelConfig cfg = pipe_cfg();
  auto plan = InjectionPlan::make(Variant::FirstHalfFrozen);
  DiTParams P = DiTParams::init(cfg, 81);
  randomize_params(P.store, 82);
  ConditionAdapterParams A = ConditionAdapterParams::init(cfg, plan, 83);
  randomize_params(A.store, 84);  // as after a step: heads are live
  IclProjectors proj = IclProjectors::init(cfg);
  randomize_params(proj.store, 85);

  Rng rng(86);
  Tensor x_t = rand_t(rng, {3, 16, 16});
  Tensor cond = rand_t(rng, {3, 16, 16});
  PromptPack prompt;
  prompt.icl_pairs.emplace_back(rand_image(rng, 16), rand_image(rng, 16));

  auto fwd = apply_plan(P, A, proj, plan, cond, prompt);
  CHECK_FALSE(P.patch_w.requires_grad());
  CHECK(A.patch_w.requires_grad());
  {
    Tape tape;
    Tensor loss = mean_all(pow_scalar(fwd(x_t, 0.5), 2.0));
    tape.backward(loss);
  }
  for (auto& it : P.store.items) CHECK_FALSE(it.second.has_grad());
  for (auto& it : A.store.items) {
    double mx = 0.0;
    if (it.second.has_grad())
      for (double g : it.second.grad()) mx = std::max(mx, std::abs(g));
    CHECK(mx > 0.0);
  }
  // projector slots see gradients too
  double pmx = 0.0;
  for (auto& it : proj.store.items)
    if (it.second.has_grad())
      for (double g : it.second.grad()) pmx = std::max(pmx, std::abs(g));
  CHECK(pmx > 0.0);

  // switching back to a co-trained plan restores backbone training
  set_trainable(InjectionPlan::make(Variant::FirstHalf), P, A, proj);
  CHECK(P.patch_w.requires_grad());

  // adapter/plan mismatch is rejected
  CHECK_THROWS_AS(
      apply_plan(P, A, proj, InjectionPlan::make(Variant::SecondHalf), cond, prompt),
      ContractError);
}

TEST_CASE("instrumented forward reports the plan's block sites") {
  ModelConfig cfg = pipe_cfg();
  Rng rng(91);
  Tensor x_t = rand_t(rng, {3, 16, 16});
  Tensor cond = rand_t(rng, {3, 16, 16});
  PromptPack prompt;
  for (auto v : {Variant::FirstHalfFrozen, Variant::FirstHalf, Variant::SecondHalf,
                 Variant::Interval}) {
    auto plan = InjectionPlan::make(v);
    DiTParams P = DiTParams::init(cfg, 92);
    randomize_params(P.store, 93);
    ConditionAdapterParams A = ConditionAdapterParams::init(cfg, plan, 94);
    IclProjectors proj = IclProjectors::init(cfg);
    ForwardTrace trace;
    conditional_velocity(P, A, proj, plan, x_t, 0.6, cond, prompt, &trace);
    CHECK(trace.injected_blocks == plan.sites(cfg.num_blocks));
    CHECK_FALSE(trace.input_concat_used);
  }

  // input concat: no sites, flag set
  auto plan = InjectionPlan::make(Variant::InputConcat);
  DiTParams P = DiTParams::init(cfg, 95);
  ConditionAdapterParams A = ConditionAdapterParams::init(cfg, plan, 96);
  IclProjectors proj = IclProjectors::init(cfg);
  ForwardTrace trace;
  conditional_velocity(P, A, proj, plan, x_t, 0.6, cond, prompt, &trace);
  CHECK(trace.injected_blocks.empty());
  CHECK(trace.input_concat_used);
}

TEST_CASE("concat fusion grows the token stream seen by the blocks") {
  ModelConfig cfg = pipe_cfg();
  auto plan = InjectionPlan::make(Variant::FirstHalf);
  DiTParams P = DiTParams::init(cfg, 101);
  randomize_params(P.store, 102);
  ConditionAdapterParams A = ConditionAdapterParams::init(cfg, plan, 103);
  IclProjectors proj = IclProjectors::init(cfg);
  Rng rng(104);
  Tensor x_t = rand_t(rng, {3, 16, 16});
  Tensor cond = rand_t(rng, {3, 16, 16});

  PromptPack prompt;
  prompt.fusion = FusionMode::Concat;
  prompt.icl_pairs.emplace_back(rand_image(rng, 16), rand_image(rng, 16));
  prompt.icl_pairs.emplace_back(rand_image(rng, 16), rand_image(rng, 16));

  ForwardTrace trace;
  Tensor out = conditional_velocity(P, A, proj, plan, x_t, 0.1, cond, prompt, &trace);
  CHECK(out.shape() == Shape{3, 16, 16});
  CHECK(trace.tokens_entering_blocks == 5 * cfg.n_tokens());
  CHECK(trace.injected_blocks == plan.sites(cfg.num_blocks));

  // the prompt images matter once the backbone is live
  PromptPack other = prompt;
  other.icl_pairs[0].first = rand_image(rng, 16);
  Tensor out2 = conditional_velocity(P, A, proj, plan, x_t, 0.1, cond, other);
  CHECK(max_abs_diff(out, out2) > 1e-12);
}

TEST_CASE("full pipeline gradient check across backbone, adapter, projectors") {
  ModelConfig cfg = pipe_cfg();
  cfg.num_blocks = 2;
  cfg.max_icl_pairs = 1;
  auto plan = InjectionPlan::make(Variant::FirstHalf);
  DiTParams P = DiTParams::init(cfg, 111);
  randomize_params(P.store, 112);
  // keep the text-path gradients above the finite-difference noise floor
  for (auto& b : P.blocks)
    for (auto& v : b.cross_gate.data()) v = 1.0;
  for (auto& v : P.instr_embed.data()) v *= 6.0;
  ConditionAdapterParams A = ConditionAdapterParams::init(cfg, plan, 113);
  randomize_params(A.store, 114);
  IclProjectors proj = IclProjectors::init(cfg);
  randomize_params(proj.store, 115);

  Rng rng(116);
  Tensor x_t = rand_t(rng, {3, 16, 16});
  Tensor cond = rand_t(rng, {3, 16, 16});
  Tensor w = rand_t(rng, {3, 16, 16});
  PromptPack prompt;
  prompt.instr_ids = {1, 4};
  prompt.icl_pairs.emplace_back(rand_image(rng, 16), rand_image(rng, 16));

  auto f = [&]() {
    return dot_with(conditional_velocity(P, A, proj, plan, x_t, 0.45, cond, prompt), w);
  };
  std::vector<Tensor> params = P.trainable();
  for (auto& t : A.store.tensors()) params.push_back(t);
  for (auto& t : proj.store.tensors()) params.push_back(t);
  CHECK(grad_check_params(f, params, 1e-4) < 1e-4);
}
