// SPDX-License-Identifier: Apache-2.0
#include "vilbert/model.hpp"

#include <cmath>
#include <cstring>

namespace vilbert {

namespace {
constexpr real kInitStd = 0.02;
constexpr real kDetectorRowTol = 1e-6;
}  // namespace

std::string to_string(Architecture a) {
  return a == Architecture::two_stream ? "two_stream" : "single_stream";
}

Architecture architecture_from_string(const std::string& s) {
  if (s == "two_stream") return Architecture::two_stream;
  if (s == "single_stream") return Architecture::single_stream;
  throw ContractError("unknown architecture '" + s +
                      "' (expected two_stream or single_stream)");
}

void ModelConfig::validate() const {
  if (text_vocab_size <= tokens::kNumSpecial) {
    throw ContractError("text_vocab_size must exceed the special token count");
  }
  if (max_text_len < 3) {
    throw ContractError("max_text_len must be at least 3 (CLS, token, SEP)");
  }
  if (text_dim <= 0 || visual_dim <= 0 || pooled_dim <= 0 ||
      visual_feature_dim <= 0 || num_region_classes <= 0 ||
      segment_count <= 0) {
    throw ContractError("model extents must all be positive");
  }
  if (text_heads <= 0 || text_dim % text_heads != 0) {
    throw ContractError("text_dim must be divisible by text_heads");
  }
  if (visual_heads <= 0 || visual_dim % visual_heads != 0) {
    throw ContractError("visual_dim must be divisible by visual_heads");
  }
  if (text_pre_fusion_layers < 0 || text_post_fusion_layers < 0) {
    throw ContractError("layer counts must be non-negative");
  }
  if (architecture == Architecture::two_stream && num_co_blocks < 1) {
    throw ContractError("two_stream requires num_co_blocks >= 1");
  }
  if (architecture == Architecture::single_stream && segment_count < 2) {
    throw ContractError(
        "single_stream uses segment id 1 for image tokens; need "
        "segment_count >= 2");
  }
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
    throw ContractError("dropout_rate must be in [0,1)");
  }
}

void ModelConfig::apply_full_preset(int64_t co_blocks) {
  if (co_blocks < 1 || co_blocks > 12) {
    throw ContractError("full preset co_blocks must be in [1,12]");
  }
  text_dim = 768;  // the stated 762 reads as a typo for the usual 768
  text_heads = 12;
  text_ffn_dim = 0;
  num_co_blocks = co_blocks;
  text_pre_fusion_layers = 12 - co_blocks;
  text_post_fusion_layers = 0;
  visual_dim = 1024;
  visual_heads = 8;
  visual_ffn_dim = 0;
  pooled_dim = 1024;
  max_text_len = 64;
}

std::vector<std::pair<std::string, std::string>> ModelConfig::to_kv() const {
  std::vector<std::pair<std::string, std::string>> kv;
  auto put = [&](const char* k, int64_t v) {
    kv.emplace_back(k, std::to_string(v));
  };
  put("text_vocab_size", text_vocab_size);
  put("max_text_len", max_text_len);
  put("text_dim", text_dim);
  put("text_heads", text_heads);
  put("text_ffn_dim", text_ffn_dim);
  put("text_pre_fusion_layers", text_pre_fusion_layers);
  put("text_post_fusion_layers", text_post_fusion_layers);
  put("num_co_blocks", num_co_blocks);
  put("visual_dim", visual_dim);
  put("visual_heads", visual_heads);
  put("visual_ffn_dim", visual_ffn_dim);
  put("visual_feature_dim", visual_feature_dim);
  put("num_region_classes", num_region_classes);
  put("segment_count", segment_count);
  put("pooled_dim", pooled_dim);
  kv.emplace_back("dropout_rate", format_real(dropout_rate));
  kv.emplace_back("co_block_has_ffn", co_block_has_ffn ? "1" : "0");
  kv.emplace_back("architecture", to_string(architecture));
  return kv;
}

ModelConfig ModelConfig::from_kv(
    const std::vector<std::pair<std::string, std::string>>& kv) {
  ModelConfig cfg;
  for (const auto& [k, v] : kv) {
    if (k == "text_vocab_size") cfg.text_vocab_size = parse_int(v);
    else if (k == "max_text_len") cfg.max_text_len = parse_int(v);
    else if (k == "text_dim") cfg.text_dim = parse_int(v);
    else if (k == "text_heads") cfg.text_heads = parse_int(v);
    else if (k == "text_ffn_dim") cfg.text_ffn_dim = parse_int(v);
    else if (k == "text_pre_fusion_layers") cfg.text_pre_fusion_layers = parse_int(v);
    else if (k == "text_post_fusion_layers") cfg.text_post_fusion_layers = parse_int(v);
    else if (k == "num_co_blocks") cfg.num_co_blocks = parse_int(v);
    else if (k == "visual_dim") cfg.visual_dim = parse_int(v);
    else if (k == "visual_heads") cfg.visual_heads = parse_int(v);
    else if (k == "visual_ffn_dim") cfg.visual_ffn_dim = parse_int(v);
    else if (k == "visual_feature_dim") cfg.visual_feature_dim = parse_int(v);
    else if (k == "num_region_classes") cfg.num_region_classes = parse_int(v);
    else if (k == "segment_count") cfg.segment_count = parse_int(v);
    else if (k == "pooled_dim") cfg.pooled_dim = parse_int(v);
    else if (k == "dropout_rate") cfg.dropout_rate = parse_real(v);
    else if (k == "co_block_has_ffn") cfg.co_block_has_ffn = parse_int(v) != 0;
    else if (k == "architecture") cfg.architecture = architecture_from_string(v);
    else throw ParseError("unknown model config key '" + k + "'");
  }
  return cfg;
}

TextInput TextInput::from_ids(std::vector<int64_t> ids, int64_t segment) {
  TextInput t;
  t.positions.resize(ids.size());
  for (size_t i = 0; i < ids.size(); ++i) {
    t.positions[i] = static_cast<int64_t>(i);
  }
  t.segment_ids.assign(ids.size(), segment);
  t.token_ids = std::move(ids);
  return t;
}

void TextInput::validate(int64_t max_text_len) const {
  if (token_ids.size() < 2) {
    throw ContractError("text input needs at least CLS and SEP");
  }
  if (length() > max_text_len) {
    throw ContractError("text length " + std::to_string(length()) +
                        " exceeds max_text_len " +
                        std::to_string(max_text_len));
  }
  if (token_ids.front() != tokens::kCls || token_ids.back() != tokens::kSep) {
    throw ContractError("text input must start with CLS and end with SEP");
  }
  if (positions.size() != token_ids.size() ||
      segment_ids.size() != token_ids.size()) {
    throw ContractError("text positions/segments must match token count");
  }
}

std::array<real, 5> compute_spatial5(const std::array<real, 4>& box) {
  const real x1 = box[0], y1 = box[1], x2 = box[2], y2 = box[3];
  if (!(0.0 <= x1 && x1 < x2 && x2 <= 1.0 && 0.0 <= y1 && y1 < y2 &&
        y2 <= 1.0)) {
    throw ContractError("degenerate or out-of-range box (" + format_real(x1) +
                        "," + format_real(y1) + "," + format_real(x2) + "," +
                        format_real(y2) + ")");
  }
  return {x1, y1, x2, y2, (x2 - x1) * (y2 - y1)};
}

void ImageInput::rebuild_spatial5() {
  spatial5.clear();
  spatial5.reserve(boxes.size());
  for (const auto& b : boxes) spatial5.push_back(compute_spatial5(b));
}

void ImageInput::validate() const {
  const int64_t k = num_regions();
  if (k < 1) throw ContractError("image input needs at least one region");
  if (feature_dim <= 0 || num_classes <= 0) {
    throw ContractError("image input feature_dim/num_classes must be set");
  }
  if (static_cast<int64_t>(features.size()) != k * feature_dim) {
    throw DimensionError("image features length mismatch");
  }
  if (static_cast<int64_t>(detector_dist.size()) != k * num_classes) {
    throw DimensionError("detector distribution length mismatch");
  }
  if (static_cast<int64_t>(spatial5.size()) != k) {
    throw ContractError("spatial5 not built (call rebuild_spatial5)");
  }
  for (int64_t i = 0; i < k; ++i) {
    const auto s = compute_spatial5(boxes[static_cast<size_t>(i)]);
    for (int j = 0; j < 5; ++j) {
      if (s[static_cast<size_t>(j)] !=
          spatial5[static_cast<size_t>(i)][static_cast<size_t>(j)]) {
        throw ContractError("spatial5 inconsistent with boxes");
      }
    }
    real sum = 0;
    for (int64_t c = 0; c < num_classes; ++c) {
      sum += detector_dist[static_cast<size_t>(i * num_classes + c)];
    }
    if (std::abs(sum - 1.0) > kDetectorRowTol) {
      throw ContractError("detector distribution row " + std::to_string(i) +
                          " sums to " + format_real(sum) + ", expected 1");
    }
  }
}

std::span<const real> ImageInput::feature_row(int64_t i) const {
  return {features.data() + i * feature_dim,
          static_cast<size_t>(feature_dim)};
}

std::span<const real> ImageInput::detector_row(int64_t i) const {
  return {detector_dist.data() + i * num_classes,
          static_cast<size_t>(num_classes)};
}

Tensor ParamMap::add(const std::string& name, Tensor t) {
  if (find(name) != nullptr) {
    throw ContractError("duplicate parameter name '" + name + "'");
  }
  t.set_requires_grad(true);
  t.set_name(name);
  items_.emplace_back(name, t);
  return t;
}

Tensor* ParamMap::find(const std::string& name) {
  for (auto& [n, t] : items_) {
    if (n == name) return &t;
  }
  return nullptr;
}

int64_t ParamMap::total_size() const {
  int64_t n = 0;
  for (const auto& [name, t] : items_) n += t.numel();
  return n;
}

int64_t ParamMap::total_size_with_prefix(const std::string& prefix) const {
  int64_t n = 0;
  for (const auto& [name, t] : items_) {
    if (name.rfind(prefix, 0) == 0) n += t.numel();
  }
  return n;
}

void ParamMap::zero_grads() {
  for (auto& [name, t] : items_) {
    t.zero_grad();
    t.node()->grad_buffer();  // reallocate so every param always has a grad
  }
}

namespace {

BlockParams register_block(ParamMap& params, const std::string& prefix,
                           const AttentionConfig& cfg, Rng& rng) {
  BlockParams p = init_block_params(cfg, rng);
  params.add(prefix + ".w_q", p.w_q);
  params.add(prefix + ".w_k", p.w_k);
  params.add(prefix + ".w_v", p.w_v);
  params.add(prefix + ".w_o", p.w_o);
  params.add(prefix + ".ffn.w1", p.ffn_w1);
  params.add(prefix + ".ffn.b1", p.ffn_b1);
  params.add(prefix + ".ffn.w2", p.ffn_w2);
  params.add(prefix + ".ffn.b2", p.ffn_b2);
  params.add(prefix + ".ln1.gamma", p.ln1_gamma);
  params.add(prefix + ".ln1.beta", p.ln1_beta);
  params.add(prefix + ".ln2.gamma", p.ln2_gamma);
  params.add(prefix + ".ln2.beta", p.ln2_beta);
  return p;
}

int64_t block_param_count(int64_t model_dim, int64_t cross_dim,
                          int64_t attn_width, int64_t ffn_dim) {
  int64_t n = 0;
  n += model_dim * attn_width;      // w_q
  n += 2 * cross_dim * attn_width;  // w_k, w_v
  n += attn_width * model_dim;      // w_o
  n += model_dim * ffn_dim + ffn_dim + ffn_dim * model_dim + model_dim;
  n += 4 * model_dim;  // two layer norms
  return n;
}

}  // namespace

VilbertModel::VilbertModel(const ModelConfig& cfg, uint64_t seed,
                           ParamMap& params)
    : cfg_(cfg) {
  cfg_.validate();
  Rng rng = Rng::stream(seed, fnv1a64("model-init"));

  const int64_t dt = cfg_.text_dim, dv = cfg_.visual_dim;
  text_attn_ = {dt, cfg_.text_heads, dt / cfg_.text_heads, cfg_.text_ffn(), dt};
  visual_attn_ = {dv, cfg_.visual_heads, dv / cfg_.visual_heads,
                  cfg_.visual_ffn(), dv};
  co_visual_attn_ = {dv, cfg_.visual_heads, dv / cfg_.visual_heads,
                     cfg_.visual_ffn(), dt};
  co_text_attn_ = {dt, cfg_.text_heads, dt / cfg_.text_heads, cfg_.text_ffn(),
                   dv};

  tok_embed_ = params.add(
      "model.text.tok_embed",
      Tensor::randn({cfg_.text_vocab_size, dt}, rng, kInitStd));
  pos_embed_ = params.add(
      "model.text.pos_embed",
      Tensor::randn({cfg_.max_text_len, dt}, rng, kInitStd));
  seg_embed_ = params.add(
      "model.text.seg_embed",
      Tensor::randn({cfg_.segment_count, dt}, rng, kInitStd));
  embed_ln_gamma_ =
      params.add("model.text.embed_ln.gamma", Tensor::full({dt}, 1.0));
  embed_ln_beta_ =
      params.add("model.text.embed_ln.beta", Tensor::zeros({dt}));

  const int64_t fd = cfg_.visual_feature_dim;
  const int64_t vis_out =
      cfg_.architecture == Architecture::two_stream ? dv : dt;
  vis_spatial_w_ = params.add("model.vis.spatial_w",
                              Tensor::randn({5, fd}, rng, kInitStd));
  vis_feat_w_ = params.add("model.vis.feat_w",
                           Tensor::randn({fd, vis_out}, rng, kInitStd));
  vis_feat_b_ = params.add("model.vis.feat_b", Tensor::zeros({vis_out}));

  if (cfg_.architecture == Architecture::two_stream) {
    for (int64_t l = 0; l < cfg_.total_text_layers(); ++l) {
      text_layers_.push_back(register_block(
          params, "model.text.layer" + std::to_string(l), text_attn_, rng));
    }
    for (int64_t b = 0; b < cfg_.num_co_blocks; ++b) {
      co_visual_.push_back(register_block(
          params, "model.co" + std::to_string(b) + ".vis", co_visual_attn_,
          rng));
      co_text_.push_back(register_block(
          params, "model.co" + std::to_string(b) + ".txt", co_text_attn_,
          rng));
      visual_layers_.push_back(register_block(
          params, "model.vis.layer" + std::to_string(b), visual_attn_, rng));
    }
  } else {
    for (int64_t l = 0; l < cfg_.total_text_layers(); ++l) {
      shared_layers_.push_back(register_block(
          params, "model.shared.layer" + std::to_string(l), text_attn_, rng));
    }
  }
}

int64_t VilbertModel::expected_param_count(const ModelConfig& cfg) {
  cfg.validate();
  const int64_t dt = cfg.text_dim, dv = cfg.visual_dim;
  const int64_t fd = cfg.visual_feature_dim;
  int64_t n = 0;
  n += cfg.text_vocab_size * dt + cfg.max_text_len * dt +
       cfg.segment_count * dt + 2 * dt;  // text embeddings + LN
  const int64_t vis_out =
      cfg.architecture == Architecture::two_stream ? dv : dt;
  n += 5 * fd + fd * vis_out + vis_out;  // region embedding
  if (cfg.architecture == Architecture::two_stream) {
    n += cfg.total_text_layers() * block_param_count(dt, dt, dt, cfg.text_ffn());
    n += cfg.num_co_blocks * block_param_count(dv, dv, dv, cfg.visual_ffn());
    n += cfg.num_co_blocks * block_param_count(dv, dt, dv, cfg.visual_ffn());
    n += cfg.num_co_blocks * block_param_count(dt, dv, dt, cfg.text_ffn());
  } else {
    n += cfg.total_text_layers() * block_param_count(dt, dt, dt, cfg.text_ffn());
  }
  return n;
}

Tensor VilbertModel::embed_text(const TextInput& text) const {
  text.validate(cfg_.max_text_len);
  for (int64_t p : text.positions) {
    if (p < 0 || p >= cfg_.max_text_len) {
      throw IndexError("text position " + std::to_string(p) +
                       " out of range [0," +
                       std::to_string(cfg_.max_text_len) + ")");
    }
  }
  const Tensor tok = embedding_lookup(tok_embed_, text.token_ids);
  const Tensor pos = embedding_lookup(pos_embed_, text.positions);
  const Tensor seg = embedding_lookup(seg_embed_, text.segment_ids);
  return layer_norm(add(add(tok, pos), seg), embed_ln_gamma_, embed_ln_beta_);
}

Tensor VilbertModel::embed_regions_with(const ImageInput& image,
                                        const Tensor& spatial_w,
                                        const Tensor& feat_w,
                                        const Tensor& feat_b) const {
  image.validate();
  if (image.feature_dim != cfg_.visual_feature_dim) {
    throw DimensionError("image feature width " +
                         std::to_string(image.feature_dim) +
                         " does not match configured " +
                         std::to_string(cfg_.visual_feature_dim));
  }
  const int64_t k = image.num_regions(), fd = image.feature_dim;
  // row 0 is the whole-image slot: mean-pooled features + full-image box
  std::vector<real> feats(static_cast<size_t>((k + 1) * fd), 0.0);
  for (int64_t i = 0; i < k; ++i) {
    const auto row = image.feature_row(i);
    for (int64_t j = 0; j < fd; ++j) {
      feats[static_cast<size_t>(j)] += row[static_cast<size_t>(j)];
      feats[static_cast<size_t>((i + 1) * fd + j)] = row[static_cast<size_t>(j)];
    }
  }
  for (int64_t j = 0; j < fd; ++j) {
    feats[static_cast<size_t>(j)] /= static_cast<real>(k);
  }
  std::vector<real> spatial(static_cast<size_t>((k + 1) * 5));
  const std::array<real, 5> full = compute_spatial5({0.0, 0.0, 1.0, 1.0});
  for (int j = 0; j < 5; ++j) spatial[static_cast<size_t>(j)] = full[static_cast<size_t>(j)];
  for (int64_t i = 0; i < k; ++i) {
    for (int j = 0; j < 5; ++j) {
      spatial[static_cast<size_t>((i + 1) * 5 + j)] =
          image.spatial5[static_cast<size_t>(i)][static_cast<size_t>(j)];
    }
  }
  const Tensor feats_t = Tensor::from_data({k + 1, fd}, std::move(feats));
  const Tensor spatial_t = Tensor::from_data({k + 1, 5}, std::move(spatial));
  const Tensor summed = add(feats_t, matmul(spatial_t, spatial_w));
  return add(matmul(summed, feat_w), feat_b);
}

Tensor VilbertModel::embed_regions(const ImageInput& image) const {
  return embed_regions_with(image, vis_spatial_w_, vis_feat_w_, vis_feat_b_);
}

Tensor VilbertModel::run_text_prefix(const Tensor& embedded) const {
  Tensor h = embedded;
  const KeyMask mask = all_visible(h.rows());
  for (int64_t l = 0; l < cfg_.text_pre_fusion_layers; ++l) {
    h = transformer_block(h, text_attn_, text_layers_[static_cast<size_t>(l)],
                          mask);
  }
  return h;
}

StreamOutputs VilbertModel::run_fusion(Tensor h_v, Tensor h_w,
                                       int64_t num_regions,
                                       int64_t text_len) const {
  const KeyMask mask_v = all_visible(num_regions + 1);
  const KeyMask mask_w = all_visible(text_len);
  const int64_t pre = cfg_.text_pre_fusion_layers;
  for (int64_t b = 0; b < cfg_.num_co_blocks; ++b) {
    auto [v2, w2] = co_attention_block(
        h_v, h_w, co_visual_attn_, co_text_attn_,
        co_visual_[static_cast<size_t>(b)], co_text_[static_cast<size_t>(b)],
        mask_v, mask_w, cfg_.co_block_has_ffn);
    h_v = transformer_block(v2, visual_attn_,
                            visual_layers_[static_cast<size_t>(b)], mask_v);
    h_w = transformer_block(w2, text_attn_,
                            text_layers_[static_cast<size_t>(pre + b)], mask_w);
  }
  for (int64_t l = 0; l < cfg_.text_post_fusion_layers; ++l) {
    h_w = transformer_block(
        h_w, text_attn_,
        text_layers_[static_cast<size_t>(pre + cfg_.num_co_blocks + l)],
        mask_w);
  }
  StreamOutputs out;
  out.h_v = h_v;
  out.h_w = h_w;
  out.h_img = slice_rows(h_v, 0, 1);
  out.h_cls = slice_rows(h_w, 0, 1);
  return out;
}

StreamOutputs VilbertModel::forward_two_stream(const TextInput& text,
                                               const ImageInput& image,
                                               bool train,
                                               Rng* dropout_rng) const {
  Tensor h_w = embed_text(text);
  Tensor h_v = embed_regions(image);
  if (train && cfg_.dropout_rate > 0.0) {
    if (dropout_rng == nullptr) {
      throw ContractError("training forward with dropout needs an rng");
    }
    h_w = dropout(h_w, cfg_.dropout_rate, *dropout_rng);
    h_v = dropout(h_v, cfg_.dropout_rate, *dropout_rng);
  }
  h_w = run_text_prefix(h_w);
  return run_fusion(std::move(h_v), std::move(h_w), image.num_regions(),
                    text.length());
}

StreamOutputs VilbertModel::forward_single_stream(const TextInput& text,
                                                  const ImageInput& image,
                                                  bool train,
                                                  Rng* dropout_rng) const {
  const int64_t k = image.num_regions();
  Tensor vis =
      embed_regions_with(image, vis_spatial_w_, vis_feat_w_, vis_feat_b_);
  // image tokens carry segment id 1 to mark the modality
  const std::vector<int64_t> seg_ids(static_cast<size_t>(k + 1), 1);
  vis = add(vis, embedding_lookup(seg_embed_, seg_ids));
  Tensor h = concat_rows(vis, embed_text(text));
  if (train && cfg_.dropout_rate > 0.0) {
    if (dropout_rng == nullptr) {
      throw ContractError("training forward with dropout needs an rng");
    }
    h = dropout(h, cfg_.dropout_rate, *dropout_rng);
  }
  const KeyMask mask = all_visible(h.rows());
  for (const auto& layer : shared_layers_) {
    h = transformer_block(h, text_attn_, layer, mask);
  }
  StreamOutputs out;
  out.h_v = slice_rows(h, 0, k + 1);
  out.h_w = slice_rows(h, k + 1, k + 1 + text.length());
  out.h_img = slice_rows(h, 0, 1);
  out.h_cls = slice_rows(h, k + 1, k + 2);
  return out;
}

StreamOutputs VilbertModel::forward(const TextInput& text,
                                    const ImageInput& image, bool train,
                                    Rng* dropout_rng) const {
  if (cfg_.architecture == Architecture::two_stream) {
    return forward_two_stream(text, image, train, dropout_rng);
  }
  return forward_single_stream(text, image, train, dropout_rng);
}

Tensor VilbertModel::text_prefix_states(const TextInput& text) const {
  if (cfg_.architecture != Architecture::two_stream) {
    throw ContractError(
        "text stream caching applies to the two_stream architecture only");
  }
  return run_text_prefix(embed_text(text));
}

StreamOutputs VilbertModel::forward_from_text_prefix(
    const Tensor& prefix_states, const ImageInput& image) const {
  if (cfg_.architecture != Architecture::two_stream) {
    throw ContractError(
        "text stream caching applies to the two_stream architecture only");
  }
  return run_fusion(embed_regions(image), prefix_states, image.num_regions(),
                    prefix_states.rows());
}

}  // namespace vilbert
