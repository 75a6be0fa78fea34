#include "lvf/model.hpp"

#include <cmath>
#include <utility>

#include "lvf/error.hpp"

namespace lvf {

void ModelConfig::validate() const {
  if (image_size <= 0 || patch_size <= 0)
    throw ConfigError("image_size and patch_size must be positive");
  if (image_size % patch_size != 0)
    throw ConfigError("image_size " + std::to_string(image_size) +
                      " is not divisible by patch_size " + std::to_string(patch_size));
  if (channels != 3) throw ConfigError("channels must be 3");
  if (hidden_dim <= 0 || num_heads <= 0)
    throw ConfigError("hidden_dim and num_heads must be positive");
  if (hidden_dim % num_heads != 0)
    throw ConfigError("hidden_dim " + std::to_string(hidden_dim) +
                      " is not divisible by num_heads " + std::to_string(num_heads));
  if (head_dim() % 4 != 0)
    throw ConfigError("head_dim " + std::to_string(head_dim()) +
                      " must be a multiple of 4 for axial rope");
  if (num_blocks < 2 || num_blocks % 2 != 0)
    throw ConfigError("num_blocks must be even and >= 2");
  if (instr_vocab_size < 1) throw ConfigError("instr_vocab_size must be >= 1");
  if (max_icl_pairs < 0) throw ConfigError("max_icl_pairs must be >= 0");
  if (adapter_depth < 1) throw ConfigError("adapter_depth must be >= 1");
  if (rope_base <= 1.0) throw ConfigError("rope_base must be > 1");
}

Tensor ParamStore::add(const std::string& name, Tensor t) {
  for (auto& it : items)
    if (it.first == name) throw ContractError("duplicate parameter name: " + name);
  t.set_requires_grad(true);
  items.emplace_back(name, t);
  return t;
}

const Tensor* ParamStore::find(const std::string& name) const {
  for (auto& it : items)
    if (it.first == name) return &it.second;
  return nullptr;
}

std::vector<Tensor> ParamStore::tensors() const {
  std::vector<Tensor> out;
  out.reserve(items.size());
  for (auto& it : items) out.push_back(it.second);
  return out;
}

int64_t ParamStore::count_scalars() const {
  int64_t n = 0;
  for (auto& it : items) n += it.second.size();
  return n;
}

namespace {

Tensor randn(Rng rng, Shape shape, double stddev) {
  std::vector<double> d(static_cast<size_t>(shape_size(shape)));
  for (auto& v : d) v = rng.normal(0.0, stddev);
  return Tensor::from_data(std::move(shape), std::move(d));
}

}  // namespace

DiTParams DiTParams::init(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  DiTParams P;
  P.cfg = cfg;
  Rng root(seed);
  const int64_t h = cfg.hidden_dim;
  const int64_t pd = cfg.patch_dim();
  const int64_t fd = cfg.ffn_dim();
  const double sd = 0.02;

  P.patch_w = P.store.add("patch_w", randn(root.child(1, 0), {pd, h}, sd));
  P.patch_b = P.store.add("patch_b", Tensor::zeros({h}));
  // Zero so that adding a condition image through this path is exactly a
  // no-op at initialization.
  P.cond_patch_w = P.store.add("cond_patch_w", Tensor::zeros({pd, h}));

  for (int64_t b = 0; b < cfg.num_blocks; ++b) {
    BlockParams bp;
    Rng br = root.child(2, static_cast<uint64_t>(b));
    auto name = [&](const char* s) { return "blk" + std::to_string(b) + "." + s; };
    bp.wq = P.store.add(name("wq"), randn(br.child(0), {h, h}, sd));
    bp.wk = P.store.add(name("wk"), randn(br.child(1), {h, h}, sd));
    bp.wv = P.store.add(name("wv"), randn(br.child(2), {h, h}, sd));
    bp.wo = P.store.add(name("wo"), randn(br.child(3), {h, h}, sd));
    bp.q_gain = P.store.add(name("q_gain"), Tensor::full({cfg.head_dim()}, 1.0));
    bp.k_gain = P.store.add(name("k_gain"), Tensor::full({cfg.head_dim()}, 1.0));
    bp.norm_attn_pre = P.store.add(name("norm_attn_pre"), Tensor::full({h}, 1.0));
    bp.norm_attn_post = P.store.add(name("norm_attn_post"), Tensor::full({h}, 1.0));
    bp.norm_ffn_pre = P.store.add(name("norm_ffn_pre"), Tensor::full({h}, 1.0));
    bp.norm_ffn_post = P.store.add(name("norm_ffn_post"), Tensor::full({h}, 1.0));
    bp.ffn_w1 = P.store.add(name("ffn_w1"), randn(br.child(4), {h, fd}, sd));
    bp.ffn_b1 = P.store.add(name("ffn_b1"), Tensor::zeros({fd}));
    bp.ffn_w2 = P.store.add(name("ffn_w2"), randn(br.child(5), {fd, h}, sd));
    bp.ffn_b2 = P.store.add(name("ffn_b2"), Tensor::zeros({h}));
    bp.mod_w1 = P.store.add(name("mod_w1"), randn(br.child(6), {h, h}, sd));
    bp.mod_b1 = P.store.add(name("mod_b1"), Tensor::zeros({h}));
    // Zero final modulation layer: every block starts as the identity map.
    bp.mod_w2 = P.store.add(name("mod_w2"), Tensor::zeros({h, 6 * h}));
    bp.mod_b2 = P.store.add(name("mod_b2"), Tensor::zeros({6 * h}));
    bp.cross_wq = P.store.add(name("cross_wq"), randn(br.child(7), {h, h}, sd));
    bp.cross_wk = P.store.add(name("cross_wk"), randn(br.child(8), {h, h}, sd));
    bp.cross_wv = P.store.add(name("cross_wv"), randn(br.child(9), {h, h}, sd));
    // Only the gate is zero; with k/v also zero the text path could never
    // receive a gradient.
    bp.cross_gate = P.store.add(name("cross_gate"), Tensor::zeros({h}));
    P.blocks.push_back(bp);
  }

  P.final_gain = P.store.add("final_gain", Tensor::full({h}, 1.0));
  P.head_w = P.store.add("head_w", Tensor::zeros({h, pd}));
  P.head_b = P.store.add("head_b", Tensor::zeros({pd}));
  P.instr_embed =
      P.store.add("instr_embed", randn(root.child(3, 0), {cfg.instr_vocab_size, h}, sd));
  return P;
}

std::vector<Tensor> DiTParams::trainable() const { return store.tensors(); }

std::vector<std::array<int64_t, 2>> grid_positions(int64_t rows, int64_t cols,
                                                   int64_t row_offset) {
  std::vector<std::array<int64_t, 2>> pos;
  pos.reserve(static_cast<size_t>(rows * cols));
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) pos.push_back({row_offset + r, c});
  return pos;
}

Tensor patchify_raw(const Tensor& img, int64_t patch) {
  if (img.rank() != 3) throw ShapeError("patchify expects a [c,h,w] tensor");
  const int64_t c = img.dim(0), H = img.dim(1), W = img.dim(2);
  if (patch <= 0 || H % patch != 0 || W % patch != 0)
    throw ShapeError("image dims must be divisible by the patch size");
  const int64_t gr = H / patch, gc = W / patch, pd = c * patch * patch;
  std::vector<int64_t> src(static_cast<size_t>(gr * gc * pd));
  int64_t i = 0;
  for (int64_t gy = 0; gy < gr; ++gy)
    for (int64_t gx = 0; gx < gc; ++gx)
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t py = 0; py < patch; ++py)
          for (int64_t px = 0; px < patch; ++px)
            src[static_cast<size_t>(i++)] =
                ch * H * W + (gy * patch + py) * W + (gx * patch + px);
  return permute_elements(img, src, {gr * gc, pd});
}

Tensor unpatchify_raw(const Tensor& tok, int64_t channels, int64_t height,
                      int64_t width, int64_t patch) {
  if (tok.rank() != 2) throw ShapeError("unpatchify expects a [n,d] tensor");
  const int64_t gr = height / patch, gc = width / patch;
  const int64_t pd = channels * patch * patch;
  if (height % patch != 0 || width % patch != 0 || tok.dim(0) != gr * gc ||
      tok.dim(1) != pd)
    throw ShapeError("token grid " + shape_str(tok.shape()) +
                     " does not match the requested image geometry");
  std::vector<int64_t> src(static_cast<size_t>(channels * height * width));
  int64_t i = 0;
  for (int64_t ch = 0; ch < channels; ++ch)
    for (int64_t y = 0; y < height; ++y)
      for (int64_t x = 0; x < width; ++x) {
        int64_t gy = y / patch, py = y % patch, gx = x / patch, px = x % patch;
        src[static_cast<size_t>(i++)] =
            (gy * gc + gx) * pd + ch * patch * patch + py * patch + px;
      }
  return permute_elements(tok, src, {channels, height, width});
}

TokenGrid embed_image(const DiTParams& P, const Tensor& img) {
  const int64_t g = P.cfg.grid_side();
  TokenGrid grid;
  grid.tokens = add(matmul(patchify_raw(img, P.cfg.patch_size), P.patch_w), P.patch_b);
  grid.positions = grid_positions(g, g);
  grid.rows = g;
  grid.cols = g;
  return grid;
}

namespace {

// Geometric frequency ladder 1 .. 1000 over dim/2 slots.
std::vector<double> embed_freqs(int64_t dim) {
  if (dim < 2 || dim % 2 != 0)
    throw ContractError("timestep embedding dim must be even and >= 2");
  const int64_t half = dim / 2;
  std::vector<double> f(static_cast<size_t>(half));
  for (int64_t j = 0; j < half; ++j)
    f[static_cast<size_t>(j)] =
        half == 1 ? 1.0
                  : std::pow(1000.0, static_cast<double>(j) /
                                         static_cast<double>(half - 1));
  return f;
}

}  // namespace

Tensor timestep_embed(double t, int64_t dim) {
  auto f = embed_freqs(dim);
  std::vector<double> d(static_cast<size_t>(dim));
  for (size_t j = 0; j < f.size(); ++j) {
    d[2 * j] = std::sin(f[j] * t);
    d[2 * j + 1] = std::cos(f[j] * t);
  }
  return Tensor::from_data({1, dim}, std::move(d));
}

double timestep_embed_lipschitz(int64_t dim) {
  double s = 0.0;
  for (double f : embed_freqs(dim)) s += f;
  return s;
}

Tensor attention(const TokenGrid& g, const BlockParams& bp, const ModelConfig& cfg,
                 Tensor* head0_logits) {
  const int64_t hd = cfg.head_dim();
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Tensor q = matmul(g.tokens, bp.wq);
  Tensor k = matmul(g.tokens, bp.wk);
  Tensor v = matmul(g.tokens, bp.wv);
  std::vector<Tensor> heads;
  for (int64_t i = 0; i < cfg.num_heads; ++i) {
    // Tight eps keeps the norm genuinely scale-invariant (rescaling raw q
    // by 100 moves the logits by ~eps/ms, well under 1e-6).
    Tensor qh = rms_norm(slice_cols(q, i * hd, (i + 1) * hd), bp.q_gain, 1, 1e-8);
    Tensor kh = rms_norm(slice_cols(k, i * hd, (i + 1) * hd), bp.k_gain, 1, 1e-8);
    qh = rope2d(qh, g.positions, cfg.rope_base);
    kh = rope2d(kh, g.positions, cfg.rope_base);
    Tensor logits = scale(matmul(qh, transpose(kh)), inv_scale);
    if (i == 0 && head0_logits) *head0_logits = logits;
    heads.push_back(matmul(softmax(logits, 1), slice_cols(v, i * hd, (i + 1) * hd)));
  }
  return matmul(concat_cols(heads), bp.wo);
}

Tensor cross_attention(const Tensor& x, const Tensor& instr, const BlockParams& bp,
                       const ModelConfig& cfg) {
  const int64_t hd = cfg.head_dim();
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Tensor q = matmul(x, bp.cross_wq);
  Tensor k = matmul(instr, bp.cross_wk);
  Tensor v = matmul(instr, bp.cross_wv);
  std::vector<Tensor> heads;
  for (int64_t i = 0; i < cfg.num_heads; ++i) {
    Tensor logits = scale(matmul(slice_cols(q, i * hd, (i + 1) * hd),
                                 transpose(slice_cols(k, i * hd, (i + 1) * hd))),
                          inv_scale);
    heads.push_back(matmul(softmax(logits, 1), slice_cols(v, i * hd, (i + 1) * hd)));
  }
  // Per-channel gate instead of an output projection; zero gate at init
  // makes the text path invisible until training opens it.
  return mul(concat_cols(heads), bp.cross_gate);
}

namespace {

// shift/scale/gate pairs for both sublayers, derived from the timestep.
struct Modulation {
  Tensor shift_attn, scale_attn, gate_attn, shift_ffn, scale_ffn, gate_ffn;
};

Modulation modulation(const BlockParams& bp, const ModelConfig& cfg,
                      const Tensor& t_embed) {
  const int64_t h = cfg.hidden_dim;
  Tensor m1 = silu(add(matmul(t_embed, bp.mod_w1), bp.mod_b1));
  Tensor m = add(matmul(m1, bp.mod_w2), bp.mod_b2);  // [1, 6h]
  auto piece = [&](int64_t i) {
    return reshape(slice_cols(m, i * h, (i + 1) * h), {h});
  };
  return {piece(0), piece(1), piece(2), piece(3), piece(4), piece(5)};
}

}  // namespace

Tensor dit_block(const TokenGrid& g, const BlockParams& bp, const ModelConfig& cfg,
                 const Tensor& t_embed, const Tensor* instr) {
  Modulation m = modulation(bp, cfg, t_embed);
  Tensor x = g.tokens;

  Tensor h = rms_norm(x, bp.norm_attn_pre, 1, 1e-6);
  h = add(mul(h, add_scalar(m.scale_attn, 1.0)), m.shift_attn);
  TokenGrid hg{h, g.positions, g.rows, g.cols};
  Tensor a = attention(hg, bp, cfg);
  if (instr) a = add(a, cross_attention(h, *instr, bp, cfg));
  a = rms_norm(a, bp.norm_attn_post, 1, 1e-6);
  x = add(x, mul(a, m.gate_attn));

  h = rms_norm(x, bp.norm_ffn_pre, 1, 1e-6);
  h = add(mul(h, add_scalar(m.scale_ffn, 1.0)), m.shift_ffn);
  Tensor f = add(matmul(silu(add(matmul(h, bp.ffn_w1), bp.ffn_b1)), bp.ffn_w2),
                 bp.ffn_b2);
  f = rms_norm(f, bp.norm_ffn_post, 1, 1e-6);
  return add(x, mul(f, m.gate_ffn));
}

namespace {

// Add a per-site feature to the image segment only; prompt tokens appended
// by in-context fusion are left untouched.
Tensor add_to_image_segment(const Tensor& tokens, const Tensor& feat,
                            int64_t n_img) {
  if (feat.rank() != 2 || feat.dim(0) != n_img || feat.dim(1) != tokens.dim(1))
    throw ContractError("condition feature " + shape_str(feat.shape()) +
                        " does not cover the image segment");
  if (tokens.dim(0) == n_img) return add(tokens, feat);
  return concat_rows({add(slice_rows(tokens, 0, n_img), feat),
                      slice_rows(tokens, n_img, tokens.dim(0))});
}

}  // namespace

Tensor dit_forward(const DiTParams& P, const TokenGrid& fused, double t,
                   const std::vector<int64_t>& instr_ids,
                   const std::vector<Tensor>& cond_features,
                   const InjectionPlan& plan, ForwardTrace* trace) {
  const ModelConfig& cfg = P.cfg;
  const int64_t n_img = fused.n_image_tokens();
  if (fused.tokens.rank() != 2 || fused.tokens.dim(1) != cfg.hidden_dim)
    throw ContractError("token grid width " + shape_str(fused.tokens.shape()) +
                        " does not match hidden_dim");
  if (static_cast<int64_t>(fused.positions.size()) != fused.tokens.dim(0))
    throw ContractError("token grid has " + std::to_string(fused.positions.size()) +
                        " positions for " + std::to_string(fused.tokens.dim(0)) +
                        " tokens");
  if (n_img <= 0 || n_img > fused.tokens.dim(0))
    throw ContractError("token grid image segment is empty or out of range");

  auto sites = plan.sites(cfg.num_blocks);
  if (cond_features.size() != sites.size())
    throw ContractError("plan '" + std::string(plan.name()) + "' expects " +
                        std::to_string(sites.size()) + " condition features, got " +
                        std::to_string(cond_features.size()));

  Tensor t_embed = timestep_embed(t, cfg.hidden_dim);
  Tensor instr;
  if (!instr_ids.empty()) instr = gather_rows(P.instr_embed, instr_ids);

  if (trace) trace->tokens_entering_blocks = fused.tokens.dim(0);
  TokenGrid g = fused;
  size_t next_site = 0;
  for (int64_t b = 0; b < cfg.num_blocks; ++b) {
    if (next_site < sites.size() && sites[next_site] == b) {
      g.tokens = add_to_image_segment(g.tokens, cond_features[next_site], n_img);
      if (trace) trace->injected_blocks.push_back(b);
      ++next_site;
    }
    g.tokens = dit_block(g, P.blocks[static_cast<size_t>(b)], cfg, t_embed,
                         instr.defined() ? &instr : nullptr);
  }

  Tensor out = rms_norm(g.tokens, P.final_gain, 1, 1e-6);
  out = add(matmul(out, P.head_w), P.head_b);
  if (g.tokens.dim(0) != n_img) out = slice_rows(out, 0, n_img);
  return unpatchify_raw(out, cfg.channels, cfg.image_size, cfg.image_size,
                        cfg.patch_size);
}

}  // namespace lvf
