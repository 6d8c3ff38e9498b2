#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "depthcrf/adapter.hpp"
#include "depthcrf/config.hpp"
#include "depthcrf/nn_ops.hpp"
#include "depthcrf/param_store.hpp"

namespace depthcrf {

/// The four encoder feature maps at 1/4, 1/8, 1/16 and 1/32 of the input
/// resolution, NCHW.
template <typename T>
struct FeaturePyramid {
  Tensor<T> f4, f8, f16, f32;

  Tensor<T>& level(int i) {
    Tensor<T>* levels[4] = {&f4, &f8, &f16, &f32};
    return *levels[i];
  }
  const Tensor<T>& level(int i) const {
    const Tensor<T>* levels[4] = {&f4, &f8, &f16, &f32};
    return *levels[i];
  }
};

/// Relative-offset lookup indices for an E x E window into a bias table
/// sized for windows up to S (table rows: (2S-1)^2).
inline std::shared_ptr<std::vector<int>> rel_pos_index(int effective, int table_window) {
  const int E = effective, S = table_window;
  auto idx = std::make_shared<std::vector<int>>(E * E * E * E);
  for (int q = 0; q < E * E; ++q)
    for (int k = 0; k < E * E; ++k) {
      int dh = (q / E) - (k / E) + S - 1;
      int dw = (q % E) - (k % E) + S - 1;
      (*idx)[q * E * E + k] = dh * (2 * S - 1) + dw;
    }
  return idx;
}

template <typename T>
struct WindowAttentionParams {
  Tensor<T> wq, bq, wk, bk, wv, bv;  // [C,C] / [C]
  Tensor<T> wo, bo;                  // output projection
  Tensor<T> rel_bias;                // [(2S-1)^2, heads], zero-init
  int heads = 1;
  int table_window = 7;

  static WindowAttentionParams create(ParamStore<T>& ps, const std::string& prefix, int c,
                                      int heads, int table_window) {
    if (c % heads)
      throw ConfigError("window_attention: width " + std::to_string(c) +
                        " not divisible by heads " + std::to_string(heads));
    WindowAttentionParams p;
    p.heads = heads;
    p.table_window = table_window;
    const T std = T(0.02);
    p.wq = ps.normal(prefix + ".wq", {c, c}, std);
    p.bq = ps.zeros(prefix + ".bq", {c});
    p.wk = ps.normal(prefix + ".wk", {c, c}, std);
    p.bk = ps.zeros(prefix + ".bk", {c});
    p.wv = ps.normal(prefix + ".wv", {c, c}, std);
    p.bv = ps.zeros(prefix + ".bv", {c});
    p.wo = ps.normal(prefix + ".wo", {c, c}, std);
    p.bo = ps.zeros(prefix + ".bo", {c});
    const int r = 2 * table_window - 1;
    p.rel_bias = ps.zeros(prefix + ".relbias", {r * r, heads});
    return p;
  }
};

/// Splits [nW,T,C] tokens into heads: -> [nW,heads,T,C/heads].
template <typename T>
Tensor<T> split_heads(Tensor<T> x, int heads) {
  const int nw = x.dim(0), t = x.dim(1), c = x.dim(2);
  return permute(reshape(x, {nw, t, heads, c / heads}), {0, 2, 1, 3});
}

template <typename T>
Tensor<T> merge_heads(Tensor<T> x) {
  const int nw = x.dim(0), h = x.dim(1), t = x.dim(2), d = x.dim(3);
  return reshape(permute(x, {0, 2, 1, 3}), {nw, t, h * d});
}

/// Per-window multi-head self-attention over [nW, E*E, C] tokens:
/// softmax(QK^T/sqrt(d) + P [+ mask]) V followed by an output projection.
/// `mask` (optional, [nW_img, E*E, E*E]) carries the shifted-window and
/// padding exclusions.
template <typename T>
Tensor<T> window_attention(Tensor<T> win, const WindowAttentionParams<T>& p, int effective_window,
                           Tensor<T> mask = {}, Tensor<T>* attn_out = nullptr) {
  const int c = win.dim(2);
  const int e = effective_window;
  if (win.dim(1) != e * e)
    throw DimError("window_attention: expected " + std::to_string(e * e) + " tokens, got " +
                   std::to_string(win.dim(1)));
  if (c % p.heads) throw ConfigError("window_attention: width not divisible by heads");
  const int dh = c / p.heads;

  Tensor<T> q = split_heads(linear(win, p.wq, p.bq), p.heads);
  Tensor<T> k = split_heads(linear(win, p.wk, p.bk), p.heads);
  Tensor<T> v = split_heads(linear(win, p.wv, p.bv), p.heads);

  Tensor<T> logits;
  {
    opcount::ScopedCategory tag(opcount::Category::kAttnInteraction);
    logits = matmul(q, k, /*trans_b=*/true);
  }
  logits = mul_scalar(logits, T(1) / std::sqrt(static_cast<T>(dh)));

  Tensor<T> bias = gather_rows(p.rel_bias, rel_pos_index(e, p.table_window));
  bias = permute(reshape(bias, {e * e, e * e, p.heads}), {2, 0, 1});
  logits = add_window_bias(logits, bias);
  if (mask.defined()) logits = add_window_mask(logits, mask);

  Tensor<T> attn = softmax_lastdim(logits);
  Tensor<T> out;
  {
    opcount::ScopedCategory tag(opcount::Category::kAttnInteraction);
    out = matmul(attn, v);
  }
  return linear(merge_heads(out), p.wo, p.bo);
}

template <typename T>
struct SwinBlockParams {
  Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;
  WindowAttentionParams<T> attn;
  Tensor<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  std::optional<AdapterParams<T>> adapter;
  bool shifted = false;

  static SwinBlockParams create(ParamStore<T>& ps, const std::string& prefix, int c, int heads,
                                const ModelConfig& cfg, bool shifted) {
    SwinBlockParams p;
    p.shifted = shifted;
    p.ln1_g = ps.constant(prefix + ".ln1.g", {c}, T(1));
    p.ln1_b = ps.zeros(prefix + ".ln1.b", {c});
    p.ln2_g = ps.constant(prefix + ".ln2.g", {c}, T(1));
    p.ln2_b = ps.zeros(prefix + ".ln2.b", {c});
    p.attn = WindowAttentionParams<T>::create(ps, prefix + ".attn", c, heads, cfg.window_size);
    const int hidden = std::max(1, static_cast<int>(c * cfg.mlp_ratio));
    p.mlp_w1 = ps.normal(prefix + ".mlp.w1", {c, hidden}, T(0.02));
    p.mlp_b1 = ps.zeros(prefix + ".mlp.b1", {hidden});
    p.mlp_w2 = ps.normal(prefix + ".mlp.w2", {hidden, c}, T(0.02));
    p.mlp_b2 = ps.zeros(prefix + ".mlp.b2", {c});
    if (cfg.ha_enabled)
      p.adapter = AdapterParams<T>::create(ps, prefix + ".ha", c, cfg.adapter_ratio,
                                           cfg.adapter_lambda_init);
    return p;
  }
};

/// One Swin block on a [B,H,W,C] map. The broadcast module acts on the
/// normalized token sequence right before the MSA; the perception module
/// runs beside the MLP and is added to its output.
template <typename T>
Tensor<T> swin_block_forward(Tensor<T> x, const SwinBlockParams<T>& p, int window) {
  const int B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const int e = std::min({window, H, W});
  const int shift = (p.shifted && e >= 2 && (e < H || e < W)) ? e / 2 : 0;

  Tensor<T> t = layer_norm(x, p.ln1_g, p.ln1_b);
  if (p.adapter) {
    t = reshape(t, {B, H * W, C});
    t = broadcast_tokens_scaled(t, p.adapter->lambda);
    t = reshape(t, {B, H, W, C});
  }
  auto wp = window_partition(t, e, shift);
  Tensor<T> mask;
  if (shift > 0 || H % e || W % e)
    mask = window_attn_mask<T>(H, W, e, shift);
  Tensor<T> a = window_attention(wp.windows, p.attn, e, mask);
  wp.windows = a;
  x = add(x, window_reverse(wp));

  Tensor<T> t2 = layer_norm(x, p.ln2_g, p.ln2_b);
  Tensor<T> m = linear(gelu(linear(t2, p.mlp_w1, p.mlp_b1)), p.mlp_w2, p.mlp_b2);
  if (p.adapter) m = add(m, perception(t2, *p.adapter));
  return add(x, m);
}

template <typename T>
struct EncoderStageParams {
  std::vector<SwinBlockParams<T>> blocks;
  // 2x2 patch merging into the next stage (absent for the last stage)
  Tensor<T> merge_ln_g, merge_ln_b, merge_w;
  bool has_merge = false;
};

template <typename T>
struct EncoderParams {
  Tensor<T> embed_w, embed_b;  // 4x4 stride-4 stem
  Tensor<T> embed_ln_g, embed_ln_b;
  std::vector<EncoderStageParams<T>> stages;

  static EncoderParams create(ParamStore<T>& ps, const ModelConfig& cfg) {
    EncoderParams p;
    const int c0 = cfg.base_width;
    p.embed_w = ps.normal("enc.embed.w", {c0, 3, 4, 4}, T(0.02));
    p.embed_b = ps.zeros("enc.embed.b", {c0});
    p.embed_ln_g = ps.constant("enc.embed.ln.g", {c0}, T(1));
    p.embed_ln_b = ps.zeros("enc.embed.ln.b", {c0});
    for (int s = 0; s < 4; ++s) {
      EncoderStageParams<T> st;
      const int c = cfg.stage_width(s);
      for (int b = 0; b < cfg.depths[s]; ++b) {
        std::string prefix = "enc.s" + std::to_string(s) + ".b" + std::to_string(b);
        st.blocks.push_back(
            SwinBlockParams<T>::create(ps, prefix, c, cfg.heads[s], cfg, b % 2 == 1));
      }
      if (s < 3) {
        st.has_merge = true;
        std::string prefix = "enc.s" + std::to_string(s) + ".merge";
        st.merge_ln_g = ps.constant(prefix + ".ln.g", {4 * c}, T(1));
        st.merge_ln_b = ps.zeros(prefix + ".ln.b", {4 * c});
        st.merge_w = ps.normal(prefix + ".w", {4 * c, 2 * c}, T(0.02));
      }
      p.stages.push_back(std::move(st));
    }
    return p;
  }
};

template <typename T>
Tensor<T> to_nchw(Tensor<T> bhwc) {
  return permute(bhwc, {0, 3, 1, 2});
}

template <typename T>
Tensor<T> to_bhwc(Tensor<T> nchw) {
  return permute(nchw, {0, 2, 3, 1});
}

/// Four-stage hierarchical encoder over a [B,3,H,W] image, H and W divisible
/// by 32. Produces the 1/4..1/32 feature pyramid.
template <typename T>
FeaturePyramid<T> encoder_forward(Tensor<T> img, const EncoderParams<T>& p,
                                  const ModelConfig& cfg) {
  if (img.rank() != 4 || img.dim(1) != 3)
    throw DimError("encoder: input must be [B,3,H,W], got " + shape_str(img.shape()));
  if (img.dim(2) % 32 || img.dim(3) % 32)
    throw DimError("encoder: input " + std::to_string(img.dim(2)) + "x" +
                   std::to_string(img.dim(3)) + " not divisible by 32 on axes [2,3]");

  Tensor<T> x = to_bhwc(conv2d(img, p.embed_w, p.embed_b, 4, 0));
  x = layer_norm(x, p.embed_ln_g, p.embed_ln_b);

  FeaturePyramid<T> pyr;
  for (int s = 0; s < 4; ++s) {
    for (const auto& blk : p.stages[s].blocks)
      x = swin_block_forward(x, blk, cfg.window_size);
    pyr.level(s) = to_nchw(x);
    if (p.stages[s].has_merge) {
      // 2x2 neighborhood concat via space-to-depth, then a linear projection
      Tensor<T> u = to_bhwc(pixel_unshuffle(to_nchw(x), 2));
      u = layer_norm(u, p.stages[s].merge_ln_g, p.stages[s].merge_ln_b);
      x = matmul(u, p.stages[s].merge_w);
    }
  }
  return pyr;
}

/// Interaction MACs a dense (whole-map) attention would need at each block,
/// the n^2 reference for the complexity comparison.
inline std::uint64_t dense_attention_macs(int height, int width, const ModelConfig& cfg) {
  std::uint64_t total = 0;
  for (int s = 0; s < 4; ++s) {
    const std::uint64_t n = std::uint64_t(height / (4 << s)) * (width / (4 << s));
    total += std::uint64_t(cfg.depths[s]) * 2 * n * n * cfg.stage_width(s);
  }
  return total;
}

}  // namespace depthcrf
