// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "vilbert/pretrain.hpp"

namespace vilbert {

/// Intersection area over union area of two normalized boxes.
real iou(const std::array<real, 4>& a, const std::array<real, 4>& b);

// ---- synthetic transfer-task datasets --------------------------------------

/// Question about spatial layout; answers are the region-class words with
/// soft scores in [0,1] (1 for every class that actually satisfies the
/// question, scaled by how often).
struct QAExample {
  ImageInput image;
  TextInput question;
  std::vector<real> targets;  // length = number of region classes
};

struct MultipleChoiceExample {
  ImageInput image;
  TextInput question;  // minimal CLS/SEP frame; options carry the content
  std::array<TextInput, 4> options;
  int64_t correct = 0;
};

/// Proposal reranking: proposals are the regions of `image`
/// (scene boxes plus jittered copies); exactly one ground-truth box.
struct RefExpExample {
  ImageInput image;
  TextInput expression;
  std::array<real, 4> gt_box{};
};

struct RetrievalPool {
  std::vector<ImageInput> images;
  std::vector<TextInput> captions;  // gold pairing: captions[i] <-> images[i]
  /// Mean-pooled raw region features per image (hard-negative metric space).
  std::vector<std::vector<real>> mean_features;

  int64_t size() const { return static_cast<int64_t>(images.size()); }
};

std::vector<QAExample> derive_vqa(std::span<const PairedExample> base,
                                  const GeneratorConfig& cfg, uint64_t seed);
std::vector<MultipleChoiceExample> derive_mc(
    std::span<const PairedExample> base, const GeneratorConfig& cfg,
    uint64_t seed);
std::vector<RefExpExample> derive_refexp(std::span<const PairedExample> base,
                                         const GeneratorConfig& cfg,
                                         uint64_t seed);
RetrievalPool make_retrieval_pool(std::span<const PairedExample> base,
                                  int64_t limit = -1);

// task dataset files: same line-record format as the base corpus, with
// task-specific extra fields
void write_vqa_dataset(const std::string& path,
                       std::span<const QAExample> examples,
                       int64_t num_classes, int64_t feature_dim);
std::vector<QAExample> load_vqa_dataset(const std::string& path);
void write_mc_dataset(const std::string& path,
                      std::span<const MultipleChoiceExample> examples,
                      int64_t num_classes, int64_t feature_dim);
std::vector<MultipleChoiceExample> load_mc_dataset(const std::string& path);
void write_refexp_dataset(const std::string& path,
                          std::span<const RefExpExample> examples,
                          int64_t num_classes, int64_t feature_dim);
std::vector<RefExpExample> load_refexp_dataset(const std::string& path);

// ---- task heads -------------------------------------------------------------

/// Two-layer MLP over the pooled product, one logit per answer.
struct VqaHead {
  Tensor w1, b1, w2, b2;
  VqaHead(const ModelConfig& cfg, int64_t num_answers, uint64_t seed,
          ParamMap& params);
};
Tensor vqa_logits(const StreamOutputs& out, const PretrainHeads& pool,
                  const VqaHead& head);

/// Single linear score over the pooled product (multiple-choice reranking).
struct McHead {
  Tensor w, b;
  McHead(const ModelConfig& cfg, uint64_t seed, ParamMap& params);
};
Tensor mc_logit(const StreamOutputs& out, const PretrainHeads& pool,
                const McHead& head);

/// Per-region matching score from the final visual states (whole-image slot
/// excluded: it has no box).
struct RefExpHead {
  Tensor w, b;
  RefExpHead(const ModelConfig& cfg, uint64_t seed, ParamMap& params);
};
Tensor refexp_scores(const StreamOutputs& out, const RefExpHead& head);

/// IoU-0.5 labels against the ground-truth box, one per proposal.
std::vector<uint8_t> refexp_labels(const RefExpExample& ex);

/// Option texts are the question tokens followed by the option tokens
/// (single CLS/SEP frame).
TextInput concat_question_option(const TextInput& question,
                                 const TextInput& option,
                                 int64_t max_text_len);

// ---- retrieval --------------------------------------------------------------

/// Indices of the k nearest images (Euclidean distance between mean-pooled
/// raw features) for every image in the pool, self excluded.
std::vector<std::vector<int32_t>> nearest_neighbor_images(
    const RetrievalPool& pool, int64_t k);

/// 4-way training instance: the true pair plus a random-caption distractor,
/// a random-image distractor, and a hard-negative image drawn from the
/// target's nearest neighbors. Slot 0 is the true pair.
struct RetrievalInstance {
  std::array<int64_t, 4> caption_of{};
  std::array<int64_t, 4> image_of{};
};
RetrievalInstance retrieval_finetune_instance(
    int64_t index, const RetrievalPool& pool,
    const std::vector<std::vector<int32_t>>& knn, Rng& rng);

struct RecallReport {
  real r1 = 0, r5 = 0, r10 = 0;
};

/// Recall@{1,5,10} given scores[c][i] = score of image i for caption c with
/// gold pairing c <-> c. Higher is better; ties break by image index.
RecallReport recall_from_scores(const std::vector<std::vector<real>>& scores);

/// Scores every caption against every image with the pretrained alignment
/// logit and reports recall. For the two-stream model the linguistic stream
/// is cached before the first co-attention layer unless use_text_cache is
/// false.
RecallReport evaluate_retrieval(const RetrievalPool& pool,
                                const VilbertModel& model,
                                const PretrainHeads& heads,
                                bool use_text_cache = true);

/// Full score matrix (captions x images), used by retrieval evaluation and
/// by tests that compare cached and uncached paths.
std::vector<std::vector<real>> retrieval_score_matrix(
    const RetrievalPool& pool, const VilbertModel& model,
    const PretrainHeads& heads, bool use_text_cache);

// ---- evaluation -------------------------------------------------------------

/// Mean soft-target score of the argmax answer.
real evaluate_vqa(std::span<const QAExample> examples,
                  const VilbertModel& model, const PretrainHeads& pool,
                  const VqaHead& head);
real evaluate_mc(std::span<const MultipleChoiceExample> examples,
                 const VilbertModel& model, const PretrainHeads& pool,
                 const McHead& head);
/// Fraction of examples whose highest-scoring proposal has IoU >= 0.5 with
/// the ground truth.
real evaluate_refexp(std::span<const RefExpExample> examples,
                     const VilbertModel& model, const RefExpHead& head);

/// Probabilities over the 4 options of one multiple-choice example.
std::array<real, 4> multiple_choice_scores(const MultipleChoiceExample& ex,
                                           const VilbertModel& model,
                                           const PretrainHeads& pool,
                                           const McHead& head);

// ---- caption sampling --------------------------------------------------------

/// Gibbs-style resampling: start from all MASK between CLS/SEP, then for
/// `steps` iterations rewrite one position (cyclic order) with a token drawn
/// from the masked-word distribution there. Special tokens are never
/// sampled into the interior.
TextInput sample_caption(const VilbertModel& model, const PretrainHeads& heads,
                         const ImageInput& image, int64_t length,
                         int64_t steps, Rng& rng);

}  // namespace vilbert
