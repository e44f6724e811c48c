// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <ostream>
#include <string>

#include "vilbert/checkpoint.hpp"
#include "vilbert/tasks.hpp"

namespace vilbert {

enum class TaskKind { vqa, mc, refexp, retrieval };

std::string to_string(TaskKind t);
TaskKind task_from_string(const std::string& s);

struct PretrainOptions {
  int64_t epochs = 10;
  int64_t batch_size = 32;
  real peak_lr = 1e-4;
  real warmup_frac = 0.1;
  real clip_norm = 1.0;  // <= 0 disables clipping
  real mask_rate = 0.15;
  bool mask_negatives = false;  // reconstruction losses on misaligned pairs
  uint64_t seed = 1;

  std::vector<std::pair<std::string, std::string>> to_kv() const;
  static PretrainOptions from_kv(
      const std::vector<std::pair<std::string, std::string>>& kv);
};

/// Mutable pretraining run: parameters, optimizer, schedule position and the
/// metric history. Convertible to/from a Checkpoint; resuming from epoch k
/// reproduces an uninterrupted run bit-exactly because every random stream
/// is derived from (seed, epoch, example).
struct PretrainSession {
  ModelConfig model_cfg;
  PretrainOptions options;
  ParamMap params;
  std::unique_ptr<VilbertModel> model;
  std::unique_ptr<PretrainHeads> heads;
  std::unique_ptr<Adam> adam;
  LrSchedule schedule;
  int64_t next_epoch = 0;
  std::vector<MetricRow> history;

  static PretrainSession fresh(const ModelConfig& cfg,
                               const PretrainOptions& options,
                               int64_t train_size);
  static PretrainSession from_checkpoint(const Checkpoint& ckpt);
  Checkpoint to_checkpoint() const;
};

/// Runs the remaining epochs (up to stop_after_epoch when >= 0). If run_dir
/// is non-empty, writes metrics.csv, a rolling checkpoints/latest.ckpt after
/// every epoch and checkpoints/final.ckpt at the end. On a non-finite loss,
/// aborts with the last good epoch's checkpoint still on disk.
void run_pretrain(PretrainSession& session,
                  std::span<const PairedExample> train,
                  std::span<const PairedExample> val,
                  const std::string& run_dir, std::ostream* log = nullptr,
                  int64_t stop_after_epoch = -1);

struct PretrainEvalReport {
  real alignment_accuracy = 0;
  real alignment_bce = 0;
  real masked_text_loss = 0;
  real masked_region_kl = 0;
};

/// Balanced evaluation: every example is scored once aligned and once as a
/// derived negative; inputs are masked exactly as in training (streams fixed
/// per example so the numbers are comparable across epochs).
PretrainEvalReport evaluate_pretrain(const VilbertModel& model,
                                     const PretrainHeads& heads,
                                     std::span<const PairedExample> val,
                                     real mask_rate, uint64_t seed);

struct FinetuneOptions {
  TaskKind task = TaskKind::vqa;
  int64_t epochs = 5;
  int64_t batch_size = 16;
  real peak_lr = 5e-5;
  real warmup_frac = 0.1;
  real clip_norm = 1.0;
  uint64_t seed = 1;
  int64_t train_limit = 0;          // 0 = use the whole base split
  int64_t retrieval_pool_limit = 400;
  int64_t eval_pool_limit = 100;

  std::vector<std::pair<std::string, std::string>> to_kv() const;
  static FinetuneOptions from_kv(
      const std::vector<std::pair<std::string, std::string>>& kv);
};

struct FinetuneSession {
  ModelConfig model_cfg;
  FinetuneOptions options;
  ParamMap params;
  std::unique_ptr<VilbertModel> model;
  std::unique_ptr<PretrainHeads> heads;
  std::unique_ptr<VqaHead> vqa_head;
  std::unique_ptr<McHead> mc_head;
  std::unique_ptr<RefExpHead> refexp_head;
  std::unique_ptr<Adam> adam;
  LrSchedule schedule;
  int64_t next_epoch = 0;
  std::vector<MetricRow> history;

  /// base == nullptr trains from scratch (randomly initialized streams).
  static FinetuneSession create(const ModelConfig& cfg,
                                const FinetuneOptions& options,
                                const Checkpoint* base, int64_t train_size);
  Checkpoint to_checkpoint() const;
};

void run_finetune(FinetuneSession& session,
                  std::span<const PairedExample> train_base,
                  std::span<const PairedExample> val_base,
                  const GeneratorConfig& gen, const std::string& run_dir,
                  std::ostream* log = nullptr);

/// Reconstructs a model (plus whichever heads the checkpoint carries) for
/// evaluation.
struct LoadedModel {
  ModelConfig cfg;
  ParamMap params;
  std::unique_ptr<VilbertModel> model;
  std::unique_ptr<PretrainHeads> heads;
  std::unique_ptr<VqaHead> vqa_head;
  std::unique_ptr<McHead> mc_head;
  std::unique_ptr<RefExpHead> refexp_head;
  std::string task;  // empty for a pretraining checkpoint
};
LoadedModel instantiate_checkpoint(const Checkpoint& ckpt);

/// Derived stream helper shared by training, evaluation and tests.
Rng stream_for(uint64_t seed, const char* label, uint64_t a, uint64_t b = 0);

}  // namespace vilbert
