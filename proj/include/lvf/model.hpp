#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "lvf/plan.hpp"
#include "lvf/rng.hpp"
#include "lvf/tensor.hpp"

namespace lvf {

struct ModelConfig {
  int64_t image_size = 32;
  int64_t channels = 3;
  int64_t patch_size = 4;
  int64_t hidden_dim = 48;
  int64_t num_heads = 2;
  int64_t num_blocks = 4;
  int64_t instr_vocab_size = 64;
  int64_t max_icl_pairs = 2;
  int64_t adapter_depth = 2;
  double rope_base = 10000.0;

  int64_t head_dim() const { return hidden_dim / num_heads; }
  int64_t grid_side() const { return image_size / patch_size; }
  int64_t n_tokens() const { return grid_side() * grid_side(); }
  int64_t patch_dim() const { return channels * patch_size * patch_size; }
  int64_t ffn_dim() const { return 4 * hidden_dim; }

  void validate() const;  // ConfigError on any violated invariant
};

// Named parameter registry. Order is fixed at construction so optimizer
// state and checkpoints can be matched positionally as well as by name.
struct ParamStore {
  std::vector<std::pair<std::string, Tensor>> items;

  Tensor add(const std::string& name, Tensor t);
  const Tensor* find(const std::string& name) const;
  std::vector<Tensor> tensors() const;
  int64_t count_scalars() const;
};

struct BlockParams {
  Tensor wq, wk, wv, wo;      // [hidden, hidden]
  Tensor q_gain, k_gain;      // [head_dim], shared across heads
  Tensor norm_attn_pre, norm_attn_post, norm_ffn_pre, norm_ffn_post;  // [hidden]
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  Tensor mod_w1, mod_b1, mod_w2, mod_b2;  // t-embed -> 6*hidden, last layer zero
  Tensor cross_wq, cross_wk, cross_wv;    // instruction cross-attention
  Tensor cross_gate;                      // [hidden], zero at init
};

struct DiTParams {
  ModelConfig cfg;
  Tensor patch_w, patch_b;  // [patch_dim, hidden], [hidden]
  Tensor cond_patch_w;      // [patch_dim, hidden], zero at init; InputConcat path
  std::vector<BlockParams> blocks;
  Tensor final_gain;        // [hidden]
  Tensor head_w, head_b;    // [hidden, patch_dim], zero at init
  Tensor instr_embed;       // [vocab, hidden]
  ParamStore store;

  static DiTParams init(const ModelConfig& cfg, uint64_t seed);
  std::vector<Tensor> trainable() const;
};

// Token sequence plus the 2D grid position of every token. The first
// rows*cols tokens are the image segment; anything after comes from
// visual-prompt concatenation.
struct TokenGrid {
  Tensor tokens;  // [n, width]
  std::vector<std::array<int64_t, 2>> positions;
  int64_t rows = 0, cols = 0;

  int64_t n_image_tokens() const { return rows * cols; }
};

// Grid coordinates (row, col) for a rows x cols patch grid, row-major,
// with every row index shifted by row_offset.
std::vector<std::array<int64_t, 2>> grid_positions(int64_t rows, int64_t cols,
                                                   int64_t row_offset = 0);

// [c,H,W] image tensor -> [n_tokens, c*p*p] raw patch rows (pure layout move).
Tensor patchify_raw(const Tensor& img, int64_t patch);
// Inverse of patchify_raw for the stated geometry.
Tensor unpatchify_raw(const Tensor& tok, int64_t channels, int64_t height,
                      int64_t width, int64_t patch);

// Raw patches -> embedded image TokenGrid (positions at row_offset 0).
TokenGrid embed_image(const DiTParams& P, const Tensor& img);

// Interleaved sin/cos features of a scalar t over log-spaced frequencies.
// t=0 gives sin components 0 and cos components 1.
Tensor timestep_embed(double t, int64_t dim);
// Sum of the frequencies used by timestep_embed: a Lipschitz bound for it.
double timestep_embed_lipschitz(int64_t dim);

// Multi-head self-attention over a token grid: QK RMS-norm, then 2D rope,
// then scaled dot-product. Optionally writes head-0 logits for inspection.
Tensor attention(const TokenGrid& g, const BlockParams& bp, const ModelConfig& cfg,
                 Tensor* head0_logits = nullptr);

// Zero-gated cross-attention read of instruction token embeddings.
Tensor cross_attention(const Tensor& x, const Tensor& instr, const BlockParams& bp,
                       const ModelConfig& cfg);

// One sandwich-normalized block with timestep modulation. instr may be null.
Tensor dit_block(const TokenGrid& g, const BlockParams& bp, const ModelConfig& cfg,
                 const Tensor& t_embed, const Tensor* instr);

struct ForwardTrace {
  std::vector<int64_t> injected_blocks;
  bool input_concat_used = false;
  int64_t tokens_entering_blocks = 0;
};

// Backbone forward over an already-fused token grid. cond_features holds one
// [n_image_tokens, hidden] tensor per plan site, added to the image segment
// at that block's input. Returns the predicted velocity field [c,H,W].
Tensor dit_forward(const DiTParams& P, const TokenGrid& fused, double t,
                   const std::vector<int64_t>& instr_ids,
                   const std::vector<Tensor>& cond_features,
                   const InjectionPlan& plan, ForwardTrace* trace = nullptr);

}  // namespace lvf
