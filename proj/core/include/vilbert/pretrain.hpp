// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "vilbert/model.hpp"
#include "vilbert/synthetic.hpp"

namespace vilbert {

enum class TextMaskAction { mask_token, random_word, unchanged };

/// Record of which inputs of one example were corrupted and how, plus the
/// reconstruction targets captured before corruption. Special positions
/// (CLS, SEP; the whole-image slot is not a region) never appear here.
struct MaskingPlan {
  struct TextEntry {
    int64_t index;        // position in the token sequence
    TextMaskAction action;
    int64_t original_id;  // reconstruction target
  };
  struct RegionEntry {
    int64_t index;  // region index (0-based; row index+1 in h_v)
    bool zeroed;
    std::vector<real> target_dist;  // detector row captured pre-corruption
  };
  std::vector<TextEntry> text;
  std::vector<RegionEntry> regions;

  bool empty() const { return text.empty() && regions.empty(); }
};

/// Each non-special token is selected independently with probability `rate`;
/// selected tokens become MASK 80% of the time, a random non-special word
/// 10%, and stay unchanged 10%.
std::pair<TextInput, MaskingPlan> apply_text_masking(const TextInput& text,
                                                     real rate, Rng& rng,
                                                     int64_t vocab_size);

/// Selected regions have their features zeroed 90% of the time and stay
/// unaltered 10%; boxes and spatial encodings are untouched either way.
std::pair<ImageInput, MaskingPlan> apply_region_masking(const ImageInput& image,
                                                        real rate, Rng& rng);

/// Output heads for the two pretraining tasks plus the shared pooling maps
/// that reconcile the two stream widths before the elementwise product.
struct PretrainHeads {
  Tensor lm_w, lm_b;          // text_dim -> vocab
  Tensor region_w, region_b;  // visual_dim -> region classes
  Tensor pool_v_w, pool_v_b;  // visual_dim -> pooled_dim
  Tensor pool_w_w, pool_w_b;  // text_dim -> pooled_dim
  Tensor align_w, align_b;    // pooled_dim -> 1

  PretrainHeads(const ModelConfig& cfg, uint64_t seed, ParamMap& params);
};

/// tanh(pool(h_IMG)) * tanh(pool(h_CLS)), the shared joint representation.
Tensor pooled_product(const Tensor& h_img, const Tensor& h_cls,
                      const PretrainHeads& heads);

/// Mean cross-entropy over the masked text positions (0 if none).
Tensor masked_text_loss(const Tensor& h_w, const MaskingPlan& plan,
                        const PretrainHeads& heads);

/// Mean KL(detector target || predicted class distribution) over masked
/// regions (0 if none). Throws if a target row does not sum to 1.
Tensor masked_region_loss(const Tensor& h_v, const MaskingPlan& plan,
                          const PretrainHeads& heads);

/// Binary alignment logit from the pooled product; P(aligned) = sigmoid.
Tensor alignment_logit(const Tensor& h_img, const Tensor& h_cls,
                       const PretrainHeads& heads);

struct NegativeExample {
  PairedExample example;  // label: misaligned
  bool swapped_image;     // else the caption was swapped
};

/// Swap either the image or the caption (p=0.5 each) with one drawn
/// uniformly from the pool, excluding the original example.
NegativeExample make_negative(const PairedExample& example,
                              std::span<const PairedExample> pool, Rng& rng);

struct PretrainItem {
  TextInput text;    // possibly corrupted
  ImageInput image;  // possibly corrupted
  MaskingPlan plan;
  bool aligned = true;
};

struct PretrainLoss {
  Tensor total;
  real masked_text = 0;
  real masked_region = 0;
  real alignment = 0;
};

/// Equal-weight sum of the three objectives over a batch. Masked losses are
/// averaged over the aligned examples carrying a plan; the alignment BCE is
/// averaged over every example. When mask_negatives is set, misaligned
/// examples contribute reconstruction losses as well.
PretrainLoss pretrain_loss(std::span<const PretrainItem> batch,
                           const VilbertModel& model,
                           const PretrainHeads& heads,
                           bool mask_negatives = false);

}  // namespace vilbert
