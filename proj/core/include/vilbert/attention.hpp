// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vilbert/tensor.hpp"

namespace vilbert {

/// Geometry of one attention block. For self-attention cross_dim ==
/// model_dim; in a co-attention block cross_dim is the opposite stream's
/// hidden size, from which keys and values are projected into this stream's
/// num_heads x head_dim attention width.
struct AttentionConfig {
  int64_t model_dim = 0;
  int64_t num_heads = 0;
  int64_t head_dim = 0;
  int64_t ffn_dim = 0;
  int64_t cross_dim = 0;

  int64_t attn_width() const { return num_heads * head_dim; }
  void validate() const;
};

/// Learnable state of one transformer block: QKV/output projections, the
/// two-layer feed-forward net, and the two post-residual layer norms.
struct BlockParams {
  Tensor w_q;  // [model_dim x num_heads*head_dim]
  Tensor w_k;  // [cross_dim x num_heads*head_dim]
  Tensor w_v;  // [cross_dim x num_heads*head_dim]
  Tensor w_o;  // [num_heads*head_dim x model_dim]
  Tensor ffn_w1, ffn_b1;  // [model_dim x ffn_dim], [ffn_dim]
  Tensor ffn_w2, ffn_b2;  // [ffn_dim x model_dim], [model_dim]
  Tensor ln1_gamma, ln1_beta;
  Tensor ln2_gamma, ln2_beta;
};

/// Key positions marked false receive exactly zero attention weight.
using KeyMask = std::vector<uint8_t>;

KeyMask all_visible(int64_t len);

/// softmax(Q Kt / sqrt(head_dim) + mask_bias) V per head, heads concatenated
/// and projected back to the query stream's model_dim. Queries come from
/// h_q, keys and values from h_kv (h_kv == h_q gives self-attention).
/// `attn_out`, when non-null, receives one [T_q x T_k] weight matrix per
/// head.
Tensor multi_head_attention(const Tensor& h_q, const Tensor& h_kv,
                            const AttentionConfig& cfg,
                            const BlockParams& params, const KeyMask& mask,
                            std::vector<Tensor>* attn_out = nullptr);

/// H' = LN(H + SelfAttn(H)); out = LN(H' + FFN(H')).
Tensor transformer_block(const Tensor& h, const AttentionConfig& cfg,
                         const BlockParams& params, const KeyMask& mask,
                         std::vector<Tensor>* attn_out = nullptr);

/// Co-attentional block: each stream queries with its own states and
/// attends over the other stream's keys/values, then proceeds through the
/// usual residual add + norm (+ FFN when with_ffn).
std::pair<Tensor, Tensor> co_attention_block(
    const Tensor& h_v, const Tensor& h_w, const AttentionConfig& cfg_v,
    const AttentionConfig& cfg_w, const BlockParams& params_v,
    const BlockParams& params_w, const KeyMask& mask_v, const KeyMask& mask_w,
    bool with_ffn = true, std::vector<Tensor>* attn_v = nullptr,
    std::vector<Tensor>* attn_w = nullptr);

/// Fresh normally-initialized block parameters (std 0.02, identity norms).
BlockParams init_block_params(const AttentionConfig& cfg, Rng& rng);

}  // namespace vilbert
