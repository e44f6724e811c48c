// SPDX-License-Identifier: Apache-2.0
#include "vilbert/pretrain.hpp"

#include <cmath>

namespace vilbert {

namespace {
constexpr real kInitStd = 0.02;
constexpr real kTargetRowTol = 1e-6;
}  // namespace

std::pair<TextInput, MaskingPlan> apply_text_masking(const TextInput& text,
                                                     real rate, Rng& rng,
                                                     int64_t vocab_size) {
  if (rate <= 0.0 || rate >= 1.0) {
    throw ContractError("mask rate must be in (0,1)");
  }
  if (vocab_size <= tokens::kNumSpecial) {
    throw ContractError("vocabulary too small for random-word replacement");
  }
  TextInput corrupted = text;
  MaskingPlan plan;
  const int64_t n = text.length();
  const int64_t num_plain = vocab_size - tokens::kNumSpecial;
  for (int64_t i = 0; i < n; ++i) {
    const int64_t id = text.token_ids[static_cast<size_t>(i)];
    if (id < tokens::kNumSpecial) continue;  // CLS/SEP/etc are never masked
    if (rng.uniform() >= rate) continue;
    MaskingPlan::TextEntry entry;
    entry.index = i;
    entry.original_id = id;
    const real u = rng.uniform();
    if (u < 0.8) {
      entry.action = TextMaskAction::mask_token;
      corrupted.token_ids[static_cast<size_t>(i)] = tokens::kMask;
    } else if (u < 0.9) {
      entry.action = TextMaskAction::random_word;
      corrupted.token_ids[static_cast<size_t>(i)] =
          tokens::kNumSpecial + rng.uniform_int(num_plain);
    } else {
      entry.action = TextMaskAction::unchanged;
    }
    plan.text.push_back(entry);
  }
  return {std::move(corrupted), std::move(plan)};
}

std::pair<ImageInput, MaskingPlan> apply_region_masking(const ImageInput& image,
                                                        real rate, Rng& rng) {
  if (rate <= 0.0 || rate >= 1.0) {
    throw ContractError("mask rate must be in (0,1)");
  }
  ImageInput corrupted = image;
  MaskingPlan plan;
  const int64_t k = image.num_regions();
  for (int64_t i = 0; i < k; ++i) {
    if (rng.uniform() >= rate) continue;
    MaskingPlan::RegionEntry entry;
    entry.index = i;
    const auto target = image.detector_row(i);
    entry.target_dist.assign(target.begin(), target.end());
    entry.zeroed = rng.uniform() < 0.9;
    if (entry.zeroed) {
      real* row = corrupted.features.data() + i * image.feature_dim;
      for (int64_t j = 0; j < image.feature_dim; ++j) row[j] = 0.0;
    }
    plan.regions.push_back(std::move(entry));
  }
  return {std::move(corrupted), std::move(plan)};
}

PretrainHeads::PretrainHeads(const ModelConfig& cfg, uint64_t seed,
                             ParamMap& params) {
  Rng rng = Rng::stream(seed, fnv1a64("pretrain-heads"));
  lm_w = params.add("pretrain.lm.w",
                    Tensor::randn({cfg.text_dim, cfg.text_vocab_size}, rng,
                                  kInitStd));
  lm_b = params.add("pretrain.lm.b", Tensor::zeros({cfg.text_vocab_size}));
  region_w = params.add(
      "pretrain.region.w",
      Tensor::randn({cfg.visual_dim, cfg.num_region_classes}, rng, kInitStd));
  region_b =
      params.add("pretrain.region.b", Tensor::zeros({cfg.num_region_classes}));
  pool_v_w = params.add(
      "pretrain.pool_v.w",
      Tensor::randn({cfg.visual_dim, cfg.pooled_dim}, rng, kInitStd));
  pool_v_b = params.add("pretrain.pool_v.b", Tensor::zeros({cfg.pooled_dim}));
  pool_w_w = params.add(
      "pretrain.pool_w.w",
      Tensor::randn({cfg.text_dim, cfg.pooled_dim}, rng, kInitStd));
  pool_w_b = params.add("pretrain.pool_w.b", Tensor::zeros({cfg.pooled_dim}));
  align_w = params.add("pretrain.align.w",
                       Tensor::randn({cfg.pooled_dim, 1}, rng, kInitStd));
  align_b = params.add("pretrain.align.b", Tensor::zeros({1}));
}

Tensor pooled_product(const Tensor& h_img, const Tensor& h_cls,
                      const PretrainHeads& heads) {
  const Tensor pv = tanh(add(matmul(h_img, heads.pool_v_w), heads.pool_v_b));
  const Tensor pw = tanh(add(matmul(h_cls, heads.pool_w_w), heads.pool_w_b));
  return mul(pv, pw);
}

Tensor masked_text_loss(const Tensor& h_w, const MaskingPlan& plan,
                        const PretrainHeads& heads) {
  if (plan.text.empty()) return Tensor::scalar(0.0);
  std::vector<int64_t> rows, targets;
  rows.reserve(plan.text.size());
  targets.reserve(plan.text.size());
  for (const auto& e : plan.text) {
    rows.push_back(e.index);
    targets.push_back(e.original_id);
  }
  const Tensor states = embedding_lookup(h_w, rows);
  const Tensor logits = add(matmul(states, heads.lm_w), heads.lm_b);
  return nll_loss(log_softmax(logits), targets);
}

Tensor masked_region_loss(const Tensor& h_v, const MaskingPlan& plan,
                          const PretrainHeads& heads) {
  if (plan.regions.empty()) return Tensor::scalar(0.0);
  const int64_t c = heads.region_b.shape()[0];
  const int64_t r = static_cast<int64_t>(plan.regions.size());
  std::vector<int64_t> rows;
  std::vector<real> targets;
  rows.reserve(plan.regions.size());
  targets.reserve(static_cast<size_t>(r * c));
  real target_entropy_sum = 0;  // sum_r sum_c t log t
  for (const auto& e : plan.regions) {
    rows.push_back(e.index + 1);  // h_v row 0 is the whole-image slot
    if (static_cast<int64_t>(e.target_dist.size()) != c) {
      throw ContractError("masked region target has wrong class count");
    }
    real sum = 0;
    for (real t : e.target_dist) sum += t;
    if (std::abs(sum - 1.0) > kTargetRowTol) {
      throw ContractError("masked region target row sums to " +
                          format_real(sum) + ", expected 1");
    }
    for (real t : e.target_dist) {
      targets.push_back(t);
      if (t > 0) target_entropy_sum += t * std::log(t);
    }
  }
  const Tensor states = embedding_lookup(h_v, rows);
  const Tensor logits = add(matmul(states, heads.region_w), heads.region_b);
  const Tensor target_t = Tensor::from_data({r, c}, std::move(targets));
  // KL(t || p) = sum t log t - sum t log p, averaged over masked regions
  const Tensor ce = soft_nll(log_softmax(logits), target_t);
  return add(ce, Tensor::scalar(target_entropy_sum / static_cast<real>(r)));
}

Tensor alignment_logit(const Tensor& h_img, const Tensor& h_cls,
                       const PretrainHeads& heads) {
  const Tensor prod = pooled_product(h_img, h_cls, heads);
  return add(matmul(prod, heads.align_w), heads.align_b);
}

NegativeExample make_negative(const PairedExample& example,
                              std::span<const PairedExample> pool, Rng& rng) {
  std::vector<size_t> candidates;
  candidates.reserve(pool.size());
  for (size_t i = 0; i < pool.size(); ++i) {
    if (pool[i].example_id != example.example_id) candidates.push_back(i);
  }
  if (candidates.empty()) {
    throw ContractError("negative sampling needs a pool of at least 2");
  }
  const bool swap_image = rng.uniform() < 0.5;
  const auto& donor =
      pool[candidates[static_cast<size_t>(rng.uniform_int(
          static_cast<int64_t>(candidates.size())))]];
  NegativeExample neg;
  neg.swapped_image = swap_image;
  neg.example = example;
  if (swap_image) {
    neg.example.image = donor.image;
    neg.example.region_classes = donor.region_classes;
  } else {
    neg.example.caption = donor.caption;
  }
  return neg;
}

PretrainLoss pretrain_loss(std::span<const PretrainItem> batch,
                           const VilbertModel& model,
                           const PretrainHeads& heads, bool mask_negatives) {
  if (batch.empty()) throw ContractError("pretrain_loss over an empty batch");
  std::vector<Tensor> text_losses, region_losses, logits;
  std::vector<real> labels;
  logits.reserve(batch.size());
  for (const auto& item : batch) {
    const StreamOutputs out = model.forward(item.text, item.image, true);
    if (item.aligned || mask_negatives) {
      if (!item.plan.text.empty()) {
        text_losses.push_back(masked_text_loss(out.h_w, item.plan, heads));
      }
      if (!item.plan.regions.empty()) {
        region_losses.push_back(
            masked_region_loss(out.h_v, item.plan, heads));
      }
    }
    logits.push_back(alignment_logit(out.h_img, out.h_cls, heads));
    labels.push_back(item.aligned ? 1.0 : 0.0);
  }

  auto mean_of = [](const std::vector<Tensor>& terms) {
    Tensor s = terms[0];
    for (size_t i = 1; i < terms.size(); ++i) s = add(s, terms[i]);
    return scale(s, 1.0 / static_cast<real>(terms.size()));
  };

  PretrainLoss result;
  Tensor text_term = text_losses.empty() ? Tensor::scalar(0.0)
                                         : mean_of(text_losses);
  Tensor region_term = region_losses.empty() ? Tensor::scalar(0.0)
                                             : mean_of(region_losses);
  Tensor logit_col = logits[0];
  for (size_t i = 1; i < logits.size(); ++i) {
    logit_col = concat_rows(logit_col, logits[i]);
  }
  const Tensor label_t =
      Tensor::from_data({static_cast<int64_t>(labels.size()), 1},
                        std::move(labels));
  const Tensor align_term = bce_with_logits(logit_col, label_t);

  result.masked_text = text_term.item();
  result.masked_region = region_term.item();
  result.alignment = align_term.item();
  result.total = add(add(text_term, region_term), align_term);
  return result;
}

}  // namespace vilbert
