// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "vilbert/attention.hpp"
#include "vilbert/tensor.hpp"

namespace vilbert {

/// Special token ids. Vocabularies are laid out with these four ids first,
/// followed by ordinary words.
namespace tokens {
constexpr int64_t kPad = 0;
constexpr int64_t kCls = 1;
constexpr int64_t kSep = 2;
constexpr int64_t kMask = 3;
constexpr int64_t kNumSpecial = 4;
}  // namespace tokens

enum class Architecture { two_stream, single_stream };

std::string to_string(Architecture a);
Architecture architecture_from_string(const std::string& s);

struct ModelConfig {
  int64_t text_vocab_size = 0;
  int64_t max_text_len = 16;
  int64_t text_dim = 64;
  int64_t text_heads = 4;
  int64_t text_ffn_dim = 0;  // 0 means 4 * text_dim
  /// Text-only transformer layers before the first co-attention exchange.
  int64_t text_pre_fusion_layers = 2;
  int64_t text_post_fusion_layers = 0;
  /// Repeated (co-attention block, then one standard block per stream) units.
  int64_t num_co_blocks = 2;
  int64_t visual_dim = 96;
  int64_t visual_heads = 4;
  int64_t visual_ffn_dim = 0;  // 0 means 4 * visual_dim
  int64_t visual_feature_dim = 16;
  int64_t num_region_classes = 8;
  int64_t segment_count = 2;
  int64_t pooled_dim = 64;
  real dropout_rate = 0.0;
  bool co_block_has_ffn = true;
  Architecture architecture = Architecture::two_stream;

  int64_t text_ffn() const { return text_ffn_dim > 0 ? text_ffn_dim : 4 * text_dim; }
  int64_t visual_ffn() const {
    return visual_ffn_dim > 0 ? visual_ffn_dim : 4 * visual_dim;
  }
  int64_t total_text_layers() const {
    return text_pre_fusion_layers + num_co_blocks + text_post_fusion_layers;
  }

  void validate() const;

  /// Full-size preset: 12-layer/768-wide/12-head text stream, 1024-wide
  /// 8-head visual stream, 6 co-attention units (text prefix shrinks so the
  /// total text depth stays at 12). Data-driven sizes (vocab, classes,
  /// feature width) are left untouched.
  void apply_full_preset(int64_t co_blocks = 6);

  std::vector<std::pair<std::string, std::string>> to_kv() const;
  static ModelConfig from_kv(
      const std::vector<std::pair<std::string, std::string>>& kv);
};

struct TextInput {
  std::vector<int64_t> token_ids;  // {CLS, w_1 ... w_T, SEP}
  std::vector<int64_t> positions;
  std::vector<int64_t> segment_ids;

  int64_t length() const { return static_cast<int64_t>(token_ids.size()); }
  static TextInput from_ids(std::vector<int64_t> ids, int64_t segment = 0);
  void validate(int64_t max_text_len) const;
};

/// (x1, y1, x2, y2, covered area fraction) from a normalized box.
std::array<real, 5> compute_spatial5(const std::array<real, 4>& box);

struct ImageInput {
  int64_t feature_dim = 0;
  int64_t num_classes = 0;
  std::vector<real> features;                 // K x feature_dim, row-major
  std::vector<std::array<real, 4>> boxes;     // normalized corners
  std::vector<std::array<real, 5>> spatial5;  // derived from boxes
  std::vector<real> detector_dist;            // K x num_classes, rows sum to 1

  int64_t num_regions() const { return static_cast<int64_t>(boxes.size()); }
  void rebuild_spatial5();
  void validate() const;
  std::span<const real> feature_row(int64_t i) const;
  std::span<const real> detector_row(int64_t i) const;
};

struct StreamOutputs {
  Tensor h_v;    // (K+1) x visual_dim, row 0 is the whole-image slot
  Tensor h_w;    // T x text_dim, row 0 is CLS
  Tensor h_img;  // 1 x visual_dim == h_v row 0
  Tensor h_cls;  // 1 x text_dim == h_w row 0
};

/// Ordered, named registry of learnable tensors. Registration order is the
/// serialization and optimizer order, so it must be deterministic.
class ParamMap {
 public:
  Tensor add(const std::string& name, Tensor t);
  const std::vector<std::pair<std::string, Tensor>>& items() const {
    return items_;
  }
  Tensor* find(const std::string& name);
  int64_t total_size() const;
  int64_t total_size_with_prefix(const std::string& prefix) const;
  void zero_grads();

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

/// The two-stream network (or its single-stream ablation): embeds text
/// tokens and image regions, runs the configured stack, and exposes the
/// per-position final states plus the pooled IMG/CLS rows.
class VilbertModel {
 public:
  VilbertModel(const ModelConfig& cfg, uint64_t seed, ParamMap& params);

  const ModelConfig& config() const { return cfg_; }

  Tensor embed_text(const TextInput& text) const;
  Tensor embed_regions(const ImageInput& image) const;

  StreamOutputs forward(const TextInput& text, const ImageInput& image,
                        bool train = false, Rng* dropout_rng = nullptr) const;

  /// Linguistic stream states just before the first co-attention layer;
  /// reusable across images for retrieval scoring (two-stream only).
  Tensor text_prefix_states(const TextInput& text) const;
  StreamOutputs forward_from_text_prefix(const Tensor& prefix_states,
                                         const ImageInput& image) const;

  /// Analytic learnable-scalar count for a config (no allocation).
  static int64_t expected_param_count(const ModelConfig& cfg);

 private:
  StreamOutputs forward_two_stream(const TextInput& text,
                                   const ImageInput& image, bool train,
                                   Rng* dropout_rng) const;
  StreamOutputs forward_single_stream(const TextInput& text,
                                      const ImageInput& image, bool train,
                                      Rng* dropout_rng) const;
  Tensor embed_regions_with(const ImageInput& image, const Tensor& spatial_w,
                            const Tensor& feat_w, const Tensor& feat_b) const;
  Tensor run_text_prefix(const Tensor& embedded) const;
  StreamOutputs run_fusion(Tensor h_v, Tensor h_w, int64_t num_regions,
                           int64_t text_len) const;

  ModelConfig cfg_;
  AttentionConfig text_attn_, visual_attn_, co_visual_attn_, co_text_attn_;

  // embeddings
  Tensor tok_embed_, pos_embed_, seg_embed_, embed_ln_gamma_, embed_ln_beta_;
  Tensor vis_spatial_w_, vis_feat_w_, vis_feat_b_;

  // two-stream stacks
  std::vector<BlockParams> text_layers_;
  std::vector<BlockParams> visual_layers_;
  std::vector<BlockParams> co_visual_;  // visual-stream side of each co block
  std::vector<BlockParams> co_text_;

  // single-stream stack (visual tokens projected into the text width)
  std::vector<BlockParams> shared_layers_;
};

}  // namespace vilbert
