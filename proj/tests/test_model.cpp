#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "lvf/model.hpp"
#include "lvf/rng.hpp"
#include "util.hpp"

using namespace lvf;
using namespace lvf::test;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.hidden_dim = 8;
  c.num_heads = 2;
  c.num_blocks = 2;
  c.instr_vocab_size = 4;
  c.max_icl_pairs = 1;
  return c;
}

void set_identity(Tensor t) {
  const int64_t n = t.dim(0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j)
      t.data()[static_cast<size_t>(i * n + j)] = (i == j) ? 1.0 : 0.0;
}

void zero_fill(Tensor t) {
  for (auto& v : t.data()) v = 0.0;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = tiny_cfg();
  CHECK_NOTHROW(c.validate());

  ModelConfig bad = c;
  bad.image_size = 17;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.hidden_dim = 9;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.num_heads = 4;  // head_dim 2, not a multiple of 4
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.num_blocks = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.channels = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.rope_base = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  ModelConfig ref;
  ref.image_size = 32;
  ref.patch_size = 4;
  CHECK(ref.n_tokens() == 64);
  CHECK(ref.grid_side() == 8);
  CHECK(ref.patch_dim() == 48);
}

TEST_CASE("param store bookkeeping") {
  DiTParams P = DiTParams::init(tiny_cfg(), 7);
  CHECK(P.store.items.size() == 7 + 22 * 2);  // 7 top-level + 22 per block
  CHECK(P.store.find("blk1.wq") != nullptr);
  CHECK(P.store.find("nope") == nullptr);
  CHECK(P.store.count_scalars() > 1000);
  for (auto& t : P.trainable()) CHECK(t.requires_grad());

  ParamStore s;
  s.add("a", Tensor::zeros({2}));
  CHECK_THROWS_AS(s.add("a", Tensor::zeros({2})), ContractError);
}

TEST_CASE("init determinism") {
  DiTParams a = DiTParams::init(tiny_cfg(), 11);
  DiTParams b = DiTParams::init(tiny_cfg(), 11);
  DiTParams c = DiTParams::init(tiny_cfg(), 12);
  bool all_same = true, any_diff = false;
  for (size_t i = 0; i < a.store.items.size(); ++i) {
    if (!same_values(a.store.items[i].second, b.store.items[i].second))
      all_same = false;
    if (!same_values(a.store.items[i].second, c.store.items[i].second))
      any_diff = true;
  }
  CHECK(all_same);
  CHECK(any_diff);

  // the declared zero-init layers really are zero
  for (const char* name : {"cond_patch_w", "head_w", "head_b", "blk0.mod_w2",
                           "blk0.mod_b2", "blk0.cross_gate"}) {
    const Tensor* t = a.store.find(name);
    REQUIRE(t != nullptr);
    for (double v : t->data()) CHECK(v == 0.0);
  }
}

TEST_CASE("patchify raw layout") {
  Rng rng(3);
  Tensor img = rand_t(rng, {3, 8, 8}, 0.0, 1.0);

  // patch 1: tokens are pixels in row-major order, channels inside each token
  Tensor t1 = patchify_raw(img, 1);
  CHECK(t1.shape() == Shape{64, 3});
  for (int64_t y = 0; y < 8; ++y)
    for (int64_t x = 0; x < 8; ++x)
      for (int64_t c = 0; c < 3; ++c)
        CHECK(t1.at({y * 8 + x, c}) == img.at({c, y, x}));

  // patch 4 spot checks: token (gy,gx) carries the patch block channel-major
  Tensor t4 = patchify_raw(img, 4);
  CHECK(t4.shape() == Shape{4, 48});
  for (auto [gy, gx, c, py, px] :
       {std::array<int64_t, 5>{0, 0, 0, 0, 0}, {1, 0, 2, 3, 1}, {1, 1, 1, 2, 3}}) {
    CHECK(t4.at({gy * 2 + gx, c * 16 + py * 4 + px}) ==
          img.at({c, gy * 4 + py, gx * 4 + px}));
  }

  CHECK_THROWS_AS(patchify_raw(img, 3), ShapeError);
  CHECK_THROWS_AS(patchify_raw(rand_t(rng, {4, 4}), 2), ShapeError);
}

TEST_CASE("unpatchify is the exact inverse") {
  Rng rng(5);
  Tensor img = rand_t(rng, {3, 12, 12});
  for (int64_t p : {1, 2, 3, 4, 6}) {
    Tensor back = unpatchify_raw(patchify_raw(img, p), 3, 12, 12, p);
    CHECK(same_values(back, img));
  }
  Tensor tok = rand_t(rng, {9, 48});
  CHECK(same_values(patchify_raw(unpatchify_raw(tok, 3, 12, 12, 4), 4), tok));
  CHECK_THROWS_AS(unpatchify_raw(tok, 3, 12, 16, 4), ShapeError);
}

TEST_CASE("timestep embedding") {
  Tensor e0 = timestep_embed(0.0, 8);
  CHECK(e0.shape() == Shape{1, 8});
  for (int64_t j = 0; j < 4; ++j) {
    CHECK(e0.at({0, 2 * j}) == 0.0);      // sin slots
    CHECK(e0.at({0, 2 * j + 1}) == 1.0);  // cos slots
  }

  // pairwise distinct on a coarse grid
  Tensor ea = timestep_embed(0.0, 8), eb = timestep_embed(0.5, 8),
         ec = timestep_embed(1.0, 8);
  CHECK(max_abs_diff(ea, eb) > 1e-3);
  CHECK(max_abs_diff(eb, ec) > 1e-3);
  CHECK(max_abs_diff(ea, ec) > 1e-3);

  // Lipschitz bound with L = sum of frequencies
  double L = timestep_embed_lipschitz(8);
  CHECK(L == doctest::Approx(1.0 + 10.0 + 100.0 + 1000.0));
  Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    double t1 = rng.uniform(), t2 = rng.uniform();
    Tensor d = sub(timestep_embed(t1, 8), timestep_embed(t2, 8));
    double n2 = 0.0;
    for (double v : d.data()) n2 += v * v;
    CHECK(std::sqrt(n2) <= L * std::abs(t1 - t2) + 1e-12);
  }
}

TEST_CASE("attention: one token with identity v/o returns the token") {
  ModelConfig cfg = tiny_cfg();
  DiTParams P = DiTParams::init(cfg, 1);
  randomize_params(P.store, 100);
  BlockParams& bp = P.blocks[0];
  set_identity(bp.wv);
  set_identity(bp.wo);

  Rng rng(2);
  TokenGrid g;
  g.tokens = rand_t(rng, {1, cfg.hidden_dim});
  g.positions = {{0, 0}};
  g.rows = g.cols = 1;
  Tensor out = attention(g, bp, cfg);
  CHECK(max_abs_diff(out, g.tokens) < 1e-15);
}

TEST_CASE("qk-norm: rescaling raw q leaves logits unchanged") {
  ModelConfig cfg = tiny_cfg();
  DiTParams P = DiTParams::init(cfg, 21);
  randomize_params(P.store, 22);
  BlockParams& bp = P.blocks[0];

  Rng rng(23);
  TokenGrid g;
  g.tokens = rand_t(rng, {4, cfg.hidden_dim});
  g.positions = grid_positions(2, 2);
  g.rows = g.cols = 2;

  Tensor l1, l2;
  attention(g, bp, cfg, &l1);
  for (auto& v : bp.wq.data()) v *= 100.0;
  attention(g, bp, cfg, &l2);
  CHECK(max_abs_diff(l1, l2) < 1e-6);
}

TEST_CASE("rope gives translation-invariant attention logits") {
  // brute force over a 4x4 grid for each (head_dim, base) combination
  for (int64_t hd : {4, 8}) {
    for (double base : {100.0, 10000.0}) {
      ModelConfig cfg = tiny_cfg();
      cfg.hidden_dim = hd;
      cfg.num_heads = 1;
      cfg.rope_base = base;
      DiTParams P = DiTParams::init(cfg, 31);
      randomize_params(P.store, 32 + static_cast<uint64_t>(hd));

      Rng rng(33);
      TokenGrid g;
      g.tokens = rand_t(rng, {16, hd});
      g.rows = g.cols = 4;
      g.positions = grid_positions(4, 4);

      Tensor l1, l2;
      attention(g, P.blocks[0], cfg, &l1);
      for (auto& p : g.positions) {
        p[0] += 7;
        p[1] += 3;
      }
      attention(g, P.blocks[0], cfg, &l2);
      CHECK(max_abs_diff(l1, l2) < 1e-10);
    }
  }
}

TEST_CASE("block with zero modulation is the identity") {
  ModelConfig cfg = tiny_cfg();
  DiTParams P = DiTParams::init(cfg, 41);
  randomize_params(P.store, 42);
  BlockParams& bp = P.blocks[0];
  zero_fill(bp.mod_w2);
  zero_fill(bp.mod_b2);

  Rng rng(43);
  TokenGrid g;
  g.tokens = rand_t(rng, {4, cfg.hidden_dim});
  g.positions = grid_positions(2, 2);
  g.rows = g.cols = 2;

  Tensor t_emb = timestep_embed(0.37, cfg.hidden_dim);
  Tensor out = dit_block(g, bp, cfg, t_emb, nullptr);
  CHECK(same_values(out, g.tokens));

  // shape contract with live modulation and instruction tokens
  randomize_params(P.store, 44);
  Tensor instr = rand_t(rng, {3, cfg.hidden_dim});
  out = dit_block(g, bp, cfg, t_emb, &instr);
  CHECK(out.shape() == g.tokens.shape());
}

TEST_CASE("block gradient check") {
  ModelConfig cfg = tiny_cfg();
  DiTParams P = DiTParams::init(cfg, 51);
  randomize_params(P.store, 52);
  BlockParams& bp = P.blocks[0];

  Rng rng(53);
  Tensor x = rand_t(rng, {4, cfg.hidden_dim});
  Tensor instr = rand_t(rng, {2, cfg.hidden_dim});
  instr.set_requires_grad(true);
  Tensor w = rand_t(rng, {4, cfg.hidden_dim});
  Tensor t_emb = timestep_embed(0.6, cfg.hidden_dim);
  auto pos = grid_positions(2, 2);

  auto run = [&](const Tensor& t) {
    TokenGrid g{t, pos, 2, 2};
    return dot_with(dit_block(g, bp, cfg, t_emb, &instr), w);
  };
  CHECK(grad_check(run, x) < 1e-4);

  std::vector<Tensor> params;
  for (auto& it : P.store.items)
    if (it.first.rfind("blk0.", 0) == 0) params.push_back(it.second);
  params.push_back(instr);
  auto run_params = [&]() {
    TokenGrid g{x, pos, 2, 2};
    return dot_with(dit_block(g, bp, cfg, t_emb, &instr), w);
  };
  CHECK(grad_check_params(run_params, params) < 1e-4);
}

TEST_CASE("forward at init predicts the zero field") {
  ModelConfig cfg = tiny_cfg();
  DiTParams P = DiTParams::init(cfg, 61);
  Rng rng(62);
  Tensor img = rand_t(rng, {3, 16, 16});
  TokenGrid g = embed_image(P, img);
  Tensor out = dit_forward(P, g, 0.5, {1, 2}, {}, InjectionPlan::make(Variant::InputConcat));
  CHECK(out.shape() == Shape{3, 16, 16});
  for (double v : out.data()) CHECK(v == 0.0);
}

TEST_CASE("forward shape contract across configs") {
  struct Row {
    int64_t img, patch, hidden, heads, blocks;
  };
  for (auto r : {Row{16, 4, 8, 2, 2}, Row{32, 8, 16, 4, 4}, Row{24, 4, 12, 3, 2}}) {
    ModelConfig cfg;
    cfg.image_size = r.img;
    cfg.patch_size = r.patch;
    cfg.hidden_dim = r.hidden;
    cfg.num_heads = r.heads;
    cfg.num_blocks = r.blocks;
    cfg.instr_vocab_size = 5;
    DiTParams P = DiTParams::init(cfg, 71);
    randomize_params(P.store, 72);
    Rng rng(73);
    Tensor img = rand_t(rng, {3, r.img, r.img});
    TokenGrid g = embed_image(P, img);
    auto plan = InjectionPlan::make(Variant::SecondHalf);
    std::vector<Tensor> feats;
    for (size_t i = 0; i < plan.sites(cfg.num_blocks).size(); ++i)
      feats.push_back(rand_t(rng, {cfg.n_tokens(), cfg.hidden_dim}, -0.1, 0.1));
    Tensor out = dit_forward(P, g, 0.25, {0, 1}, feats, plan);
    CHECK(out.shape() == Shape{3, r.img, r.img});
  }
}

TEST_CASE("zero cross-gate makes output independent of instructions") {
  ModelConfig cfg = tiny_cfg();
  DiTParams P = DiTParams::init(cfg, 81);
  randomize_params(P.store, 82);
  for (auto& b : P.blocks) zero_fill(b.cross_gate);

  Rng rng(83);
  Tensor img = rand_t(rng, {3, 16, 16});
  TokenGrid g = embed_image(P, img);
  auto plan = InjectionPlan::make(Variant::InputConcat);
  Tensor none = dit_forward(P, g, 0.4, {}, {}, plan);
  Tensor some = dit_forward(P, g, 0.4, {1, 3, 2}, {}, plan);
  CHECK(same_values(none, some));

  // sanity: a live gate does feed the instructions through
  for (auto& b : P.blocks)
    for (auto& v : b.cross_gate.data()) v = 0.5;
  Tensor gated_a = dit_forward(P, g, 0.4, {1, 3, 2}, {}, plan);
  Tensor gated_b = dit_forward(P, g, 0.4, {2, 0, 1}, {}, plan);
  CHECK(max_abs_diff(gated_a, gated_b) > 1e-12);
}

TEST_CASE("plan sites and injection trace") {
  CHECK(InjectionPlan::make(Variant::InputConcat).sites(8).empty());
  CHECK(InjectionPlan::make(Variant::FirstHalf).sites(8) ==
        std::vector<int64_t>{0, 1, 2, 3});
  CHECK(InjectionPlan::make(Variant::FirstHalfFrozen).sites(8) ==
        std::vector<int64_t>{0, 1, 2, 3});
  CHECK(InjectionPlan::make(Variant::SecondHalf).sites(8) ==
        std::vector<int64_t>{4, 5, 6, 7});
  CHECK(InjectionPlan::make(Variant::Interval).sites(8) ==
        std::vector<int64_t>{0, 2, 4, 6});
  CHECK(InjectionPlan::make(Variant::Interval, 3).sites(8) ==
        std::vector<int64_t>{0, 3, 6});
  CHECK(!InjectionPlan::make(Variant::FirstHalfFrozen).train_backbone);
  CHECK(InjectionPlan::make(Variant::Interval).train_backbone);
  for (const char* n : {"input", "first-frozen", "first", "second", "interval"})
    CHECK(std::string(InjectionPlan::from_name(n).name()) == n);
  CHECK_THROWS_AS(InjectionPlan::from_name("middle"), ParamError);
  InjectionPlan bad = InjectionPlan::make(Variant::FirstHalf);
  bad.train_backbone = false;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  ModelConfig cfg = tiny_cfg();
  cfg.num_blocks = 8;
  DiTParams P = DiTParams::init(cfg, 91);
  randomize_params(P.store, 92);
  Rng rng(93);
  Tensor img = rand_t(rng, {3, 16, 16});
  TokenGrid g = embed_image(P, img);
  for (auto v : {Variant::FirstHalf, Variant::SecondHalf, Variant::Interval}) {
    auto plan = InjectionPlan::make(v);
    auto sites = plan.sites(8);
    std::vector<Tensor> feats;
    for (size_t i = 0; i < sites.size(); ++i)
      feats.push_back(Tensor::zeros({cfg.n_tokens(), cfg.hidden_dim}));
    ForwardTrace trace;
    dit_forward(P, g, 0.1, {}, feats, plan, &trace);
    CHECK(trace.injected_blocks == sites);
    CHECK(trace.tokens_entering_blocks == cfg.n_tokens());
  }

  // feature count mismatch is a contract error
  CHECK_THROWS_AS(
      dit_forward(P, g, 0.1, {}, {}, InjectionPlan::make(Variant::FirstHalf)),
      ContractError);
  CHECK_THROWS_AS(dit_forward(P, g, 0.1, {},
                              {Tensor::zeros({cfg.n_tokens(), cfg.hidden_dim})},
                              InjectionPlan::make(Variant::InputConcat)),
                  ContractError);
}

TEST_CASE("injection touches only the image segment of a fused grid") {
  ModelConfig cfg = tiny_cfg();
  DiTParams P = DiTParams::init(cfg, 101);
  randomize_params(P.store, 102);
  Rng rng(103);
  Tensor img = rand_t(rng, {3, 16, 16});
  TokenGrid g = embed_image(P, img);

  // append a visual-prompt segment below the image grid
  TokenGrid fused;
  fused.tokens = concat_rows({g.tokens, rand_t(rng, {16, cfg.hidden_dim})});
  fused.positions = g.positions;
  for (auto p : grid_positions(4, 4, 4)) fused.positions.push_back(p);
  fused.rows = g.rows;
  fused.cols = g.cols;

  auto plan = InjectionPlan::make(Variant::FirstHalf);
  std::vector<Tensor> feats = {rand_t(rng, {16, cfg.hidden_dim}, -0.2, 0.2)};
  ForwardTrace trace;
  Tensor out = dit_forward(P, fused, 0.8, {1}, feats, plan, &trace);
  CHECK(out.shape() == Shape{3, 16, 16});
  CHECK(trace.tokens_entering_blocks == 32);

  // a feature sized for the fused grid instead of the image segment is rejected
  CHECK_THROWS_AS(
      dit_forward(P, fused, 0.8, {1}, {rand_t(rng, {32, cfg.hidden_dim})}, plan),
      ContractError);
}

TEST_CASE("end-to-end gradient check on a 2-block 16-token model") {
  ModelConfig cfg = tiny_cfg();  // 16x16 / patch 4 -> 16 tokens, 2 blocks
  DiTParams P = DiTParams::init(cfg, 111);
  randomize_params(P.store, 112);
  // open the cross gates so text-path gradients sit well above the
  // finite-difference noise floor
  for (auto& b : P.blocks)
    for (auto& v : b.cross_gate.data()) v = 0.6;

  Rng rng(113);
  Tensor img = rand_t(rng, {3, 16, 16});
  Tensor feat = rand_t(rng, {cfg.n_tokens(), cfg.hidden_dim}, -0.2, 0.2);
  feat.set_requires_grad(true);
  Tensor w = rand_t(rng, {3, 16, 16});
  auto plan = InjectionPlan::make(Variant::FirstHalf);

  auto f = [&]() {
    TokenGrid g = embed_image(P, img);
    return dot_with(dit_forward(P, g, 0.35, {1, 3}, {feat}, plan), w);
  };
  std::vector<Tensor> params = P.trainable();
  params.push_back(feat);
  CHECK(grad_check_params(f, params, 1e-4) < 1e-4);
}

TEST_CASE("forward is deterministic") {
  ModelConfig cfg = tiny_cfg();
  DiTParams P = DiTParams::init(cfg, 121);
  randomize_params(P.store, 122);
  Rng rng(123);
  Tensor img = rand_t(rng, {3, 16, 16});
  TokenGrid g1 = embed_image(P, img);
  TokenGrid g2 = embed_image(P, img);
  auto plan = InjectionPlan::make(Variant::InputConcat);
  Tensor a = dit_forward(P, g1, 0.9, {2}, {}, plan);
  Tensor b = dit_forward(P, g2, 0.9, {2}, {}, plan);
  CHECK(same_values(a, b));
}
