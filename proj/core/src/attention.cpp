// SPDX-License-Identifier: Apache-2.0
#include "vilbert/attention.hpp"

#include <cmath>

namespace vilbert {

namespace {
constexpr real kMaskBias = -1e9;
constexpr real kInitStd = 0.02;
}  // namespace

void AttentionConfig::validate() const {
  if (model_dim <= 0 || num_heads <= 0 || head_dim <= 0 || ffn_dim <= 0 ||
      cross_dim <= 0) {
    throw ContractError("attention config extents must all be positive");
  }
}

KeyMask all_visible(int64_t len) {
  return KeyMask(static_cast<size_t>(len), uint8_t{1});
}

Tensor multi_head_attention(const Tensor& h_q, const Tensor& h_kv,
                            const AttentionConfig& cfg,
                            const BlockParams& params, const KeyMask& mask,
                            std::vector<Tensor>* attn_out) {
  cfg.validate();
  if (h_q.cols() != cfg.model_dim) {
    throw DimensionError("attention query width " + shape_str(h_q.shape()) +
                         " does not match model_dim " +
                         std::to_string(cfg.model_dim));
  }
  if (h_kv.cols() != cfg.cross_dim) {
    throw DimensionError("attention key/value width " +
                         shape_str(h_kv.shape()) + " does not match cross_dim " +
                         std::to_string(cfg.cross_dim));
  }
  const int64_t t_k = h_kv.rows();
  if (static_cast<int64_t>(mask.size()) != t_k) {
    throw DimensionError("key mask length " + std::to_string(mask.size()) +
                         " does not match key count " + std::to_string(t_k));
  }
  bool any_visible = false;
  for (uint8_t m : mask) any_visible = any_visible || (m != 0);
  if (!any_visible) {
    throw ContractError("attention over a fully masked key set is undefined");
  }

  const Tensor q = matmul(h_q, params.w_q);
  const Tensor k = matmul(h_kv, params.w_k);
  const Tensor v = matmul(h_kv, params.w_v);

  std::vector<real> bias_row(static_cast<size_t>(t_k), 0.0);
  for (int64_t j = 0; j < t_k; ++j) {
    if (!mask[static_cast<size_t>(j)]) bias_row[static_cast<size_t>(j)] = kMaskBias;
  }
  const Tensor bias = Tensor::from_data({t_k}, std::move(bias_row));

  const real inv_sqrt = 1.0 / std::sqrt(static_cast<real>(cfg.head_dim));
  std::vector<Tensor> heads;
  heads.reserve(static_cast<size_t>(cfg.num_heads));
  for (int64_t h = 0; h < cfg.num_heads; ++h) {
    const int64_t c0 = h * cfg.head_dim, c1 = (h + 1) * cfg.head_dim;
    const Tensor qh = slice_cols(q, c0, c1);
    const Tensor kh = slice_cols(k, c0, c1);
    const Tensor vh = slice_cols(v, c0, c1);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    scores = add(scores, bias);
    const Tensor weights = softmax(scores, 1);
    if (attn_out != nullptr) attn_out->push_back(weights);
    heads.push_back(matmul(weights, vh));
  }
  return matmul(concat_cols(heads), params.w_o);
}

namespace {

Tensor feed_forward(const Tensor& h, const BlockParams& p) {
  const Tensor inner = gelu(add(matmul(h, p.ffn_w1), p.ffn_b1));
  return add(matmul(inner, p.ffn_w2), p.ffn_b2);
}

}  // namespace

Tensor transformer_block(const Tensor& h, const AttentionConfig& cfg,
                         const BlockParams& params, const KeyMask& mask,
                         std::vector<Tensor>* attn_out) {
  const Tensor attn = multi_head_attention(h, h, cfg, params, mask, attn_out);
  const Tensor h1 =
      layer_norm(add(h, attn), params.ln1_gamma, params.ln1_beta);
  const Tensor ff = feed_forward(h1, params);
  return layer_norm(add(h1, ff), params.ln2_gamma, params.ln2_beta);
}

std::pair<Tensor, Tensor> co_attention_block(
    const Tensor& h_v, const Tensor& h_w, const AttentionConfig& cfg_v,
    const AttentionConfig& cfg_w, const BlockParams& params_v,
    const BlockParams& params_w, const KeyMask& mask_v, const KeyMask& mask_w,
    bool with_ffn, std::vector<Tensor>* attn_v, std::vector<Tensor>* attn_w) {
  // keys/values are exchanged: the visual stream attends over linguistic
  // states and vice versa
  const Tensor av =
      multi_head_attention(h_v, h_w, cfg_v, params_v, mask_w, attn_v);
  const Tensor aw =
      multi_head_attention(h_w, h_v, cfg_w, params_w, mask_v, attn_w);

  Tensor out_v =
      layer_norm(add(h_v, av), params_v.ln1_gamma, params_v.ln1_beta);
  Tensor out_w =
      layer_norm(add(h_w, aw), params_w.ln1_gamma, params_w.ln1_beta);
  if (with_ffn) {
    out_v = layer_norm(add(out_v, feed_forward(out_v, params_v)),
                       params_v.ln2_gamma, params_v.ln2_beta);
    out_w = layer_norm(add(out_w, feed_forward(out_w, params_w)),
                       params_w.ln2_gamma, params_w.ln2_beta);
  }
  return {out_v, out_w};
}

BlockParams init_block_params(const AttentionConfig& cfg, Rng& rng) {
  cfg.validate();
  BlockParams p;
  const int64_t aw = cfg.attn_width();
  p.w_q = Tensor::randn({cfg.model_dim, aw}, rng, kInitStd, true);
  p.w_k = Tensor::randn({cfg.cross_dim, aw}, rng, kInitStd, true);
  p.w_v = Tensor::randn({cfg.cross_dim, aw}, rng, kInitStd, true);
  p.w_o = Tensor::randn({aw, cfg.model_dim}, rng, kInitStd, true);
  p.ffn_w1 = Tensor::randn({cfg.model_dim, cfg.ffn_dim}, rng, kInitStd, true);
  p.ffn_b1 = Tensor::zeros({cfg.ffn_dim}, true);
  p.ffn_w2 = Tensor::randn({cfg.ffn_dim, cfg.model_dim}, rng, kInitStd, true);
  p.ffn_b2 = Tensor::zeros({cfg.model_dim}, true);
  p.ln1_gamma = Tensor::full({cfg.model_dim}, 1.0, true);
  p.ln1_beta = Tensor::zeros({cfg.model_dim}, true);
  p.ln2_gamma = Tensor::full({cfg.model_dim}, 1.0, true);
  p.ln2_beta = Tensor::zeros({cfg.model_dim}, true);
  return p;
}

}  // namespace vilbert
