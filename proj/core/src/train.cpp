// SPDX-License-Identifier: Apache-2.0
#include "vilbert/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

namespace vilbert {

namespace fs = std::filesystem;

std::string to_string(TaskKind t) {
  switch (t) {
    case TaskKind::vqa: return "vqa";
    case TaskKind::mc: return "mc";
    case TaskKind::refexp: return "refexp";
    case TaskKind::retrieval: return "retrieval";
  }
  throw ContractError("invalid task kind");
}

TaskKind task_from_string(const std::string& s) {
  if (s == "vqa") return TaskKind::vqa;
  if (s == "mc") return TaskKind::mc;
  if (s == "refexp") return TaskKind::refexp;
  if (s == "retrieval") return TaskKind::retrieval;
  throw ContractError("unknown task '" + s +
                      "' (expected vqa|mc|refexp|retrieval)");
}

Rng stream_for(uint64_t seed, const char* label, uint64_t a, uint64_t b) {
  Fnv1a64 h;
  h.update(label, std::char_traits<char>::length(label));
  h.update(&a, sizeof(a));
  h.update(&b, sizeof(b));
  return Rng::stream(seed, h.digest());
}

// ---- options serialization ---------------------------------------------------

std::vector<std::pair<std::string, std::string>> PretrainOptions::to_kv()
    const {
  return {
      {"opt.epochs", std::to_string(epochs)},
      {"opt.batch_size", std::to_string(batch_size)},
      {"opt.peak_lr", format_real(peak_lr)},
      {"opt.warmup_frac", format_real(warmup_frac)},
      {"opt.clip_norm", format_real(clip_norm)},
      {"opt.mask_rate", format_real(mask_rate)},
      {"opt.mask_negatives", mask_negatives ? "1" : "0"},
      {"opt.seed", std::to_string(seed)},
  };
}

PretrainOptions PretrainOptions::from_kv(
    const std::vector<std::pair<std::string, std::string>>& kv) {
  PretrainOptions o;
  for (const auto& [k, v] : kv) {
    if (k == "opt.epochs") o.epochs = parse_int(v);
    else if (k == "opt.batch_size") o.batch_size = parse_int(v);
    else if (k == "opt.peak_lr") o.peak_lr = parse_real(v);
    else if (k == "opt.warmup_frac") o.warmup_frac = parse_real(v);
    else if (k == "opt.clip_norm") o.clip_norm = parse_real(v);
    else if (k == "opt.mask_rate") o.mask_rate = parse_real(v);
    else if (k == "opt.mask_negatives") o.mask_negatives = parse_int(v) != 0;
    else if (k == "opt.seed") o.seed = static_cast<uint64_t>(parse_int(v));
  }
  return o;
}

std::vector<std::pair<std::string, std::string>> FinetuneOptions::to_kv()
    const {
  return {
      {"opt.task", vilbert::to_string(task)},
      {"opt.epochs", std::to_string(epochs)},
      {"opt.batch_size", std::to_string(batch_size)},
      {"opt.peak_lr", format_real(peak_lr)},
      {"opt.warmup_frac", format_real(warmup_frac)},
      {"opt.clip_norm", format_real(clip_norm)},
      {"opt.seed", std::to_string(seed)},
      {"opt.train_limit", std::to_string(train_limit)},
      {"opt.retrieval_pool_limit", std::to_string(retrieval_pool_limit)},
      {"opt.eval_pool_limit", std::to_string(eval_pool_limit)},
  };
}

FinetuneOptions FinetuneOptions::from_kv(
    const std::vector<std::pair<std::string, std::string>>& kv) {
  FinetuneOptions o;
  for (const auto& [k, v] : kv) {
    if (k == "opt.task") o.task = task_from_string(v);
    else if (k == "opt.epochs") o.epochs = parse_int(v);
    else if (k == "opt.batch_size") o.batch_size = parse_int(v);
    else if (k == "opt.peak_lr") o.peak_lr = parse_real(v);
    else if (k == "opt.warmup_frac") o.warmup_frac = parse_real(v);
    else if (k == "opt.clip_norm") o.clip_norm = parse_real(v);
    else if (k == "opt.seed") o.seed = static_cast<uint64_t>(parse_int(v));
    else if (k == "opt.train_limit") o.train_limit = parse_int(v);
    else if (k == "opt.retrieval_pool_limit") o.retrieval_pool_limit = parse_int(v);
    else if (k == "opt.eval_pool_limit") o.eval_pool_limit = parse_int(v);
  }
  return o;
}

// ---- schedule helpers ----------------------------------------------------------

namespace {

LrSchedule make_schedule(real peak_lr, real warmup_frac, int64_t epochs,
                         int64_t items, int64_t batch_size) {
  if (items < 1) throw ContractError("training split is empty");
  const int64_t steps_per_epoch = (items + batch_size - 1) / batch_size;
  LrSchedule s;
  s.peak_lr = peak_lr;
  s.total_steps = std::max<int64_t>(2, epochs * steps_per_epoch);
  s.warmup_steps = std::clamp<int64_t>(
      static_cast<int64_t>(std::llround(warmup_frac *
                                        static_cast<real>(s.total_steps))),
      1, s.total_steps - 1);
  s.validate();
  return s;
}

void write_run_outputs(const std::string& run_dir,
                       const std::vector<MetricRow>& history,
                       const Checkpoint& ckpt, bool final_epoch) {
  if (run_dir.empty()) return;
  fs::create_directories(fs::path(run_dir) / "checkpoints");
  write_metrics_csv((fs::path(run_dir) / "metrics.csv").string(), history);
  save_checkpoint((fs::path(run_dir) / "checkpoints" / "latest.ckpt").string(),
                  ckpt);
  if (final_epoch) {
    save_checkpoint((fs::path(run_dir) / "checkpoints" / "final.ckpt").string(),
                    ckpt);
  }
}

}  // namespace

// ---- pretraining ----------------------------------------------------------------

PretrainSession PretrainSession::fresh(const ModelConfig& cfg,
                                       const PretrainOptions& options,
                                       int64_t train_size) {
  PretrainSession s;
  s.model_cfg = cfg;
  s.options = options;
  s.model = std::make_unique<VilbertModel>(cfg, options.seed, s.params);
  s.heads = std::make_unique<PretrainHeads>(cfg, options.seed, s.params);
  s.adam = std::make_unique<Adam>(s.params);
  s.schedule = make_schedule(options.peak_lr, options.warmup_frac,
                             options.epochs, train_size, options.batch_size);
  return s;
}

Checkpoint PretrainSession::to_checkpoint() const {
  Checkpoint c;
  c.config_kv = model_cfg.to_kv();
  const auto opt_kv = options.to_kv();
  c.config_kv.insert(c.config_kv.end(), opt_kv.begin(), opt_kv.end());
  c.capture_params(params);
  c.has_optimizer = true;
  c.adam_step = adam->step_count();
  c.adam_cfg = adam->config();
  c.adam_m = adam->m();
  c.adam_v = adam->v();
  c.schedule = schedule;
  c.next_epoch = next_epoch;
  c.total_epochs = options.epochs;
  c.run_seed = options.seed;
  c.rng_state =
      stream_for(options.seed, "epoch", static_cast<uint64_t>(next_epoch))
          .state();
  c.history = history;
  return c;
}

PretrainSession PretrainSession::from_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::pair<std::string, std::string>> model_kv;
  for (const auto& [k, v] : ckpt.config_kv) {
    if (k.rfind("opt.", 0) != 0 && k != "task") model_kv.emplace_back(k, v);
  }
  PretrainSession s;
  s.model_cfg = ModelConfig::from_kv(model_kv);
  s.options = PretrainOptions::from_kv(ckpt.config_kv);
  s.model = std::make_unique<VilbertModel>(s.model_cfg, s.options.seed,
                                           s.params);
  s.heads = std::make_unique<PretrainHeads>(s.model_cfg, s.options.seed,
                                            s.params);
  ckpt.restore_params(s.params);
  s.adam = std::make_unique<Adam>(s.params, ckpt.adam_cfg);
  if (!ckpt.has_optimizer) {
    throw ContractError("pretraining checkpoint lacks optimizer state");
  }
  s.adam->restore(ckpt.adam_step, ckpt.adam_m, ckpt.adam_v);
  s.schedule = ckpt.schedule;
  s.next_epoch = ckpt.next_epoch;
  s.history = ckpt.history;
  return s;
}

PretrainEvalReport evaluate_pretrain(const VilbertModel& model,
                                     const PretrainHeads& heads,
                                     std::span<const PairedExample> val,
                                     real mask_rate, uint64_t seed) {
  if (val.empty()) throw ContractError("empty validation split");
  PretrainEvalReport rep;
  int64_t correct = 0, scored = 0;
  int64_t text_terms = 0, region_terms = 0;
  real bce_sum = 0;
  const int64_t vocab = model.config().text_vocab_size;
  for (size_t i = 0; i < val.size(); ++i) {
    const auto& ex = val[i];
    Rng mask_rng = stream_for(seed, "val-mask", static_cast<uint64_t>(ex.example_id));
    auto [text_c, plan_t] =
        apply_text_masking(ex.caption, mask_rate, mask_rng, vocab);
    auto [img_c, plan_r] = apply_region_masking(ex.image, mask_rate, mask_rng);
    const StreamOutputs out = model.forward(text_c, img_c);
    if (!plan_t.text.empty()) {
      rep.masked_text_loss += masked_text_loss(out.h_w, plan_t, heads).item();
      ++text_terms;
    }
    if (!plan_r.regions.empty()) {
      rep.masked_region_kl +=
          masked_region_loss(out.h_v, plan_r, heads).item();
      ++region_terms;
    }
    const real logit_pos = alignment_logit(out.h_img, out.h_cls, heads).item();
    correct += logit_pos > 0 ? 1 : 0;
    bce_sum += std::log1p(std::exp(-std::abs(logit_pos))) +
               std::max(-logit_pos, 0.0);
    ++scored;

    Rng neg_rng = stream_for(seed, "val-neg", static_cast<uint64_t>(ex.example_id));
    const NegativeExample neg = make_negative(ex, val, neg_rng);
    Rng neg_mask_rng =
        stream_for(seed, "val-neg-mask", static_cast<uint64_t>(ex.example_id));
    auto [ntext, nplan_t] =
        apply_text_masking(neg.example.caption, mask_rate, neg_mask_rng, vocab);
    auto [nimg, nplan_r] =
        apply_region_masking(neg.example.image, mask_rate, neg_mask_rng);
    const StreamOutputs nout = model.forward(ntext, nimg);
    const real logit_neg =
        alignment_logit(nout.h_img, nout.h_cls, heads).item();
    correct += logit_neg <= 0 ? 1 : 0;
    bce_sum += std::log1p(std::exp(-std::abs(logit_neg))) +
               std::max(logit_neg, 0.0);
    ++scored;
  }
  rep.alignment_accuracy = static_cast<real>(correct) / static_cast<real>(scored);
  rep.alignment_bce = bce_sum / static_cast<real>(scored);
  rep.masked_text_loss =
      text_terms > 0 ? rep.masked_text_loss / static_cast<real>(text_terms) : 0;
  rep.masked_region_kl =
      region_terms > 0 ? rep.masked_region_kl / static_cast<real>(region_terms)
                       : 0;
  return rep;
}

namespace {

void append_eval_rows(std::vector<MetricRow>& history, int64_t epoch,
                      const PretrainEvalReport& rep) {
  history.push_back({epoch, "val", "alignment_accuracy", rep.alignment_accuracy});
  history.push_back({epoch, "val", "alignment_bce", rep.alignment_bce});
  history.push_back({epoch, "val", "masked_text_loss", rep.masked_text_loss});
  history.push_back({epoch, "val", "masked_region_kl", rep.masked_region_kl});
}

}  // namespace

void run_pretrain(PretrainSession& session,
                  std::span<const PairedExample> train,
                  std::span<const PairedExample> val,
                  const std::string& run_dir, std::ostream* log,
                  int64_t stop_after_epoch) {
  if (train.size() < 2) throw ContractError("pretraining needs >= 2 pairs");
  const auto& opt = session.options;
  const int64_t last_epoch =
      stop_after_epoch >= 0 ? std::min(stop_after_epoch, opt.epochs)
                            : opt.epochs;
  const int64_t vocab = session.model_cfg.text_vocab_size;

  if (session.next_epoch == 0) {
    const auto rep = evaluate_pretrain(*session.model, *session.heads, val,
                                       opt.mask_rate, opt.seed);
    append_eval_rows(session.history, 0, rep);
    write_run_outputs(run_dir, session.history, session.to_checkpoint(),
                      false);
    if (log != nullptr) {
      *log << "epoch 0 (init) val alignment_accuracy="
           << format_real(rep.alignment_accuracy)
           << " masked_region_kl=" << format_real(rep.masked_region_kl)
           << "\n";
    }
  }

  std::vector<int64_t> order(train.size());
  for (int64_t epoch = session.next_epoch; epoch < last_epoch; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng order_rng = stream_for(opt.seed, "order", static_cast<uint64_t>(epoch));
    order_rng.shuffle(order);

    real sum_total = 0, sum_text = 0, sum_region = 0, sum_align = 0;
    int64_t steps_this_epoch = 0;
    for (size_t begin = 0; begin < order.size();
         begin += static_cast<size_t>(opt.batch_size)) {
      const size_t end =
          std::min(order.size(), begin + static_cast<size_t>(opt.batch_size));
      std::vector<PretrainItem> batch;
      batch.reserve(2 * (end - begin));
      for (size_t oi = begin; oi < end; ++oi) {
        const auto& ex = train[static_cast<size_t>(order[oi])];
        const uint64_t id = static_cast<uint64_t>(ex.example_id);
        Rng mask_rng = stream_for(opt.seed, "mask", static_cast<uint64_t>(epoch), id);
        PretrainItem pos;
        auto [text_c, plan_t] =
            apply_text_masking(ex.caption, opt.mask_rate, mask_rng, vocab);
        auto [img_c, plan_r] =
            apply_region_masking(ex.image, opt.mask_rate, mask_rng);
        pos.text = std::move(text_c);
        pos.image = std::move(img_c);
        pos.plan.text = std::move(plan_t.text);
        pos.plan.regions = std::move(plan_r.regions);
        pos.aligned = true;
        batch.push_back(std::move(pos));

        // one misaligned derivative per aligned example; its inputs are
        // masked the same way so the alignment head sees no corruption cue
        Rng neg_rng = stream_for(opt.seed, "neg", static_cast<uint64_t>(epoch), id);
        const NegativeExample neg = make_negative(ex, train, neg_rng);
        Rng neg_mask_rng =
            stream_for(opt.seed, "neg-mask", static_cast<uint64_t>(epoch), id);
        PretrainItem ni;
        auto [ntext, nplan_t] = apply_text_masking(
            neg.example.caption, opt.mask_rate, neg_mask_rng, vocab);
        auto [nimg, nplan_r] =
            apply_region_masking(neg.example.image, opt.mask_rate, neg_mask_rng);
        ni.text = std::move(ntext);
        ni.image = std::move(nimg);
        ni.plan.text = std::move(nplan_t.text);
        ni.plan.regions = std::move(nplan_r.regions);
        ni.aligned = false;
        batch.push_back(std::move(ni));
      }

      session.params.zero_grads();
      Graph graph;
      PretrainLoss loss;
      {
        GraphScope scope(graph);
        loss = pretrain_loss(batch, *session.model, *session.heads,
                             opt.mask_negatives);
        if (!std::isfinite(loss.total.item())) {
          throw NumericError(
              "pretraining loss diverged (non-finite) in epoch " +
              std::to_string(epoch + 1) +
              (run_dir.empty()
                   ? std::string("")
                   : "; last good checkpoint: " + run_dir +
                         "/checkpoints/latest.ckpt"));
        }
        graph.backward(loss.total);
      }
      clip_grad_norm(session.params, opt.clip_norm);
      const int64_t step_index =
          std::min(session.adam->step_count() + 1, session.schedule.total_steps);
      session.adam->step(session.params, lr_at(step_index, session.schedule));

      sum_total += loss.total.item();
      sum_text += loss.masked_text;
      sum_region += loss.masked_region;
      sum_align += loss.alignment;
      ++steps_this_epoch;
    }

    const real inv = 1.0 / static_cast<real>(steps_this_epoch);
    session.history.push_back({epoch + 1, "train", "loss_total", sum_total * inv});
    session.history.push_back(
        {epoch + 1, "train", "loss_masked_text", sum_text * inv});
    session.history.push_back(
        {epoch + 1, "train", "loss_masked_region", sum_region * inv});
    session.history.push_back(
        {epoch + 1, "train", "loss_alignment", sum_align * inv});

    const auto rep = evaluate_pretrain(*session.model, *session.heads, val,
                                       opt.mask_rate, opt.seed);
    append_eval_rows(session.history, epoch + 1, rep);
    session.next_epoch = epoch + 1;
    write_run_outputs(run_dir, session.history, session.to_checkpoint(),
                      epoch + 1 == opt.epochs);
    if (log != nullptr) {
      *log << "epoch " << (epoch + 1)
           << " train loss_total=" << format_real(sum_total * inv)
           << " val alignment_accuracy=" << format_real(rep.alignment_accuracy)
           << " masked_region_kl=" << format_real(rep.masked_region_kl)
           << "\n";
    }
  }
}

// ---- fine-tuning -----------------------------------------------------------------

FinetuneSession FinetuneSession::create(const ModelConfig& cfg,
                                        const FinetuneOptions& options,
                                        const Checkpoint* base,
                                        int64_t train_size) {
  FinetuneSession s;
  s.model_cfg = cfg;
  s.options = options;
  s.model = std::make_unique<VilbertModel>(cfg, options.seed, s.params);
  s.heads = std::make_unique<PretrainHeads>(cfg, options.seed, s.params);
  if (base != nullptr) {
    base->restore_params(s.params);  // task head params are added below
  }
  switch (options.task) {
    case TaskKind::vqa:
      s.vqa_head = std::make_unique<VqaHead>(cfg, cfg.num_region_classes,
                                             options.seed, s.params);
      break;
    case TaskKind::mc:
      s.mc_head = std::make_unique<McHead>(cfg, options.seed, s.params);
      break;
    case TaskKind::refexp:
      s.refexp_head = std::make_unique<RefExpHead>(cfg, options.seed, s.params);
      break;
    case TaskKind::retrieval:
      break;  // reuses the pretrained alignment head
  }
  s.adam = std::make_unique<Adam>(s.params);
  s.schedule = make_schedule(options.peak_lr, options.warmup_frac,
                             options.epochs, train_size, options.batch_size);
  return s;
}

Checkpoint FinetuneSession::to_checkpoint() const {
  Checkpoint c;
  c.config_kv = model_cfg.to_kv();
  c.config_kv.emplace_back("task", vilbert::to_string(options.task));
  const auto opt_kv = options.to_kv();
  c.config_kv.insert(c.config_kv.end(), opt_kv.begin(), opt_kv.end());
  c.capture_params(params);
  c.has_optimizer = true;
  c.adam_step = adam->step_count();
  c.adam_cfg = adam->config();
  c.adam_m = adam->m();
  c.adam_v = adam->v();
  c.schedule = schedule;
  c.next_epoch = next_epoch;
  c.total_epochs = options.epochs;
  c.run_seed = options.seed;
  c.rng_state =
      stream_for(options.seed, "epoch", static_cast<uint64_t>(next_epoch))
          .state();
  c.history = history;
  return c;
}

LoadedModel instantiate_checkpoint(const Checkpoint& ckpt) {
  LoadedModel lm;
  std::vector<std::pair<std::string, std::string>> model_kv;
  uint64_t seed = 1;
  for (const auto& [k, v] : ckpt.config_kv) {
    if (k == "task") lm.task = v;
    else if (k == "opt.seed") seed = static_cast<uint64_t>(parse_int(v));
    if (k.rfind("opt.", 0) != 0 && k != "task") model_kv.emplace_back(k, v);
  }
  lm.cfg = ModelConfig::from_kv(model_kv);
  lm.model = std::make_unique<VilbertModel>(lm.cfg, seed, lm.params);
  lm.heads = std::make_unique<PretrainHeads>(lm.cfg, seed, lm.params);
  if (lm.task == "vqa") {
    lm.vqa_head = std::make_unique<VqaHead>(lm.cfg, lm.cfg.num_region_classes,
                                            seed, lm.params);
  } else if (lm.task == "mc") {
    lm.mc_head = std::make_unique<McHead>(lm.cfg, seed, lm.params);
  } else if (lm.task == "refexp") {
    lm.refexp_head = std::make_unique<RefExpHead>(lm.cfg, seed, lm.params);
  }
  ckpt.restore_params(lm.params);
  return lm;
}

namespace {

struct FinetuneData {
  std::vector<QAExample> vqa_train, vqa_val;
  std::vector<MultipleChoiceExample> mc_train, mc_val;
  std::vector<RefExpExample> refexp_train, refexp_val;
  RetrievalPool train_pool, eval_pool;
  std::vector<std::vector<int32_t>> knn;
  int64_t train_items = 0;
};

FinetuneData derive_task_data(TaskKind task,
                              std::span<const PairedExample> train_base,
                              std::span<const PairedExample> val_base,
                              const GeneratorConfig& gen,
                              const FinetuneOptions& opt) {
  FinetuneData d;
  const uint64_t seed = opt.seed ^ fnv1a64("task-data");
  auto limit = [&](std::span<const PairedExample> base) {
    if (opt.train_limit > 0 &&
        static_cast<int64_t>(base.size()) > opt.train_limit) {
      return base.subspan(0, static_cast<size_t>(opt.train_limit));
    }
    return base;
  };
  switch (task) {
    case TaskKind::vqa:
      d.vqa_train = derive_vqa(limit(train_base), gen, seed);
      d.vqa_val = derive_vqa(val_base, gen, seed);
      d.train_items = static_cast<int64_t>(d.vqa_train.size());
      break;
    case TaskKind::mc:
      d.mc_train = derive_mc(limit(train_base), gen, seed);
      d.mc_val = derive_mc(val_base, gen, seed);
      d.train_items = static_cast<int64_t>(d.mc_train.size());
      break;
    case TaskKind::refexp:
      d.refexp_train = derive_refexp(limit(train_base), gen, seed);
      d.refexp_val = derive_refexp(val_base, gen, seed);
      d.train_items = static_cast<int64_t>(d.refexp_train.size());
      break;
    case TaskKind::retrieval:
      d.train_pool = make_retrieval_pool(train_base, opt.retrieval_pool_limit);
      d.eval_pool = make_retrieval_pool(val_base, opt.eval_pool_limit);
      d.knn = nearest_neighbor_images(
          d.train_pool, std::min<int64_t>(100, d.train_pool.size() - 1));
      d.train_items = d.train_pool.size();
      break;
  }
  if (d.train_items < 1) throw ContractError("task training split is empty");
  return d;
}

}  // namespace

void run_finetune(FinetuneSession& session,
                  std::span<const PairedExample> train_base,
                  std::span<const PairedExample> val_base,
                  const GeneratorConfig& gen, const std::string& run_dir,
                  std::ostream* log) {
  const auto& opt = session.options;
  FinetuneData data =
      derive_task_data(opt.task, train_base, val_base, gen, opt);

  auto eval_and_log = [&](int64_t epoch) {
    switch (opt.task) {
      case TaskKind::vqa:
        session.history.push_back(
            {epoch, "val", "accuracy",
             evaluate_vqa(data.vqa_val, *session.model, *session.heads,
                          *session.vqa_head)});
        break;
      case TaskKind::mc:
        session.history.push_back(
            {epoch, "val", "accuracy",
             evaluate_mc(data.mc_val, *session.model, *session.heads,
                         *session.mc_head)});
        break;
      case TaskKind::refexp:
        session.history.push_back(
            {epoch, "val", "accuracy",
             evaluate_refexp(data.refexp_val, *session.model,
                             *session.refexp_head)});
        break;
      case TaskKind::retrieval: {
        const RecallReport rep =
            evaluate_retrieval(data.eval_pool, *session.model, *session.heads);
        session.history.push_back({epoch, "val", "r1", rep.r1});
        session.history.push_back({epoch, "val", "r5", rep.r5});
        session.history.push_back({epoch, "val", "r10", rep.r10});
        break;
      }
    }
    if (log != nullptr) {
      *log << "epoch " << epoch << " val "
           << session.history.back().metric << "="
           << format_real(session.history.back().value) << "\n";
    }
  };

  if (session.next_epoch == 0) {
    eval_and_log(0);
    write_run_outputs(run_dir, session.history, session.to_checkpoint(),
                      false);
  }

  std::vector<int64_t> order(static_cast<size_t>(data.train_items));
  for (int64_t epoch = session.next_epoch; epoch < opt.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng order_rng = stream_for(opt.seed, "ft-order", static_cast<uint64_t>(epoch));
    order_rng.shuffle(order);

    real loss_sum = 0;
    int64_t steps = 0;
    for (size_t begin = 0; begin < order.size();
         begin += static_cast<size_t>(opt.batch_size)) {
      const size_t end =
          std::min(order.size(), begin + static_cast<size_t>(opt.batch_size));
      session.params.zero_grads();
      Graph graph;
      Tensor batch_loss;
      {
        GraphScope scope(graph);
        std::vector<Tensor> terms;
        terms.reserve(end - begin);
        for (size_t oi = begin; oi < end; ++oi) {
          const int64_t idx = order[oi];
          switch (opt.task) {
            case TaskKind::vqa: {
              const auto& ex = data.vqa_train[static_cast<size_t>(idx)];
              const StreamOutputs out =
                  session.model->forward(ex.question, ex.image, true);
              const Tensor logits =
                  vqa_logits(out, *session.heads, *session.vqa_head);
              const Tensor targets = Tensor::from_data(
                  {1, static_cast<int64_t>(ex.targets.size())},
                  std::vector<real>(ex.targets));
              terms.push_back(bce_with_logits(logits, targets));
              break;
            }
            case TaskKind::mc: {
              const auto& ex = data.mc_train[static_cast<size_t>(idx)];
              std::vector<Tensor> logits;
              for (int o = 0; o < 4; ++o) {
                const TextInput text = concat_question_option(
                    ex.question, ex.options[static_cast<size_t>(o)],
                    session.model_cfg.max_text_len);
                const StreamOutputs out =
                    session.model->forward(text, ex.image, true);
                logits.push_back(mc_logit(out, *session.heads,
                                          *session.mc_head));
              }
              const Tensor row = concat_cols(logits);
              const std::vector<int64_t> target{ex.correct};
              terms.push_back(nll_loss(log_softmax(row), target));
              break;
            }
            case TaskKind::refexp: {
              const auto& ex = data.refexp_train[static_cast<size_t>(idx)];
              const StreamOutputs out =
                  session.model->forward(ex.expression, ex.image, true);
              const Tensor scores = refexp_scores(out, *session.refexp_head);
              const auto labels = refexp_labels(ex);
              std::vector<real> target_vals(labels.begin(), labels.end());
              const Tensor targets = Tensor::from_data(
                  {static_cast<int64_t>(target_vals.size()), 1},
                  std::move(target_vals));
              terms.push_back(bce_with_logits(scores, targets));
              break;
            }
            case TaskKind::retrieval: {
              Rng inst_rng = stream_for(opt.seed, "ft-ret",
                                        static_cast<uint64_t>(epoch),
                                        static_cast<uint64_t>(idx));
              const RetrievalInstance inst = retrieval_finetune_instance(
                  idx, data.train_pool, data.knn, inst_rng);
              std::vector<Tensor> logits;
              for (int s = 0; s < 4; ++s) {
                const StreamOutputs out = session.model->forward(
                    data.train_pool
                        .captions[static_cast<size_t>(inst.caption_of[static_cast<size_t>(s)])],
                    data.train_pool
                        .images[static_cast<size_t>(inst.image_of[static_cast<size_t>(s)])],
                    true);
                logits.push_back(
                    alignment_logit(out.h_img, out.h_cls, *session.heads));
              }
              const Tensor row = concat_cols(logits);
              const std::vector<int64_t> target{0};
              terms.push_back(nll_loss(log_softmax(row), target));
              break;
            }
          }
        }
        Tensor sum = terms[0];
        for (size_t i = 1; i < terms.size(); ++i) sum = add(sum, terms[i]);
        batch_loss = scale(sum, 1.0 / static_cast<real>(terms.size()));
        if (!std::isfinite(batch_loss.item())) {
          throw NumericError("fine-tuning loss diverged (non-finite) in epoch " +
                             std::to_string(epoch + 1));
        }
        graph.backward(batch_loss);
      }
      clip_grad_norm(session.params, opt.clip_norm);
      const int64_t step_index =
          std::min(session.adam->step_count() + 1, session.schedule.total_steps);
      session.adam->step(session.params, lr_at(step_index, session.schedule));
      loss_sum += batch_loss.item();
      ++steps;
    }

    session.history.push_back(
        {epoch + 1, "train", "loss", loss_sum / static_cast<real>(steps)});
    eval_and_log(epoch + 1);
    session.next_epoch = epoch + 1;
    write_run_outputs(run_dir, session.history, session.to_checkpoint(),
                      epoch + 1 == opt.epochs);
  }
}

}  // namespace vilbert
