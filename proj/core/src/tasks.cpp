// SPDX-License-Identifier: Apache-2.0
#include "vilbert/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace vilbert {

namespace {
constexpr real kInitStd = 0.02;
}

real iou(const std::array<real, 4>& a, const std::array<real, 4>& b) {
  const auto sa = compute_spatial5(a);  // validates the box
  const auto sb = compute_spatial5(b);
  const real ix = std::max(0.0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
  const real iy = std::max(0.0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
  const real inter = ix * iy;
  const real uni = sa[4] + sb[4] - inter;
  return inter / uni;
}

// ---- task dataset derivation -------------------------------------------------

std::vector<QAExample> derive_vqa(std::span<const PairedExample> base,
                                  const GeneratorConfig& cfg, uint64_t seed) {
  const auto& vocab = cfg.vocab;
  std::vector<QAExample> out;
  out.reserve(base.size());
  for (const auto& ex : base) {
    const int64_t k = ex.image.num_regions();
    if (k < 2) continue;
    Rng rng = Rng::stream(seed, static_cast<uint64_t>(ex.example_id));
    const int64_t anchor = rng.uniform_int(k);
    int64_t other = rng.uniform_int(k - 1);
    if (other >= anchor) ++other;
    const Relation rel =
        relation_between(ex.image.boxes[static_cast<size_t>(other)],
                         ex.image.boxes[static_cast<size_t>(anchor)]);
    const int64_t anchor_class = ex.region_classes[static_cast<size_t>(anchor)];

    QAExample qa;
    qa.image = ex.image;
    qa.question = TextInput::from_ids(
        {tokens::kCls, vocab.id_of("what"), vocab.id_of("is"),
         vocab.relation_id(rel), vocab.id_of("the"),
         vocab.class_word_id(anchor_class), tokens::kSep});
    // a class answers the question if some region of that class stands in
    // the asked relation to some anchor-class region
    std::vector<real> counts(static_cast<size_t>(cfg.num_region_classes), 0.0);
    for (int64_t r = 0; r < k; ++r) {
      bool satisfies = false;
      for (int64_t b = 0; b < k && !satisfies; ++b) {
        if (b == r) continue;
        if (ex.region_classes[static_cast<size_t>(b)] != anchor_class) continue;
        satisfies = relation_between(ex.image.boxes[static_cast<size_t>(r)],
                                     ex.image.boxes[static_cast<size_t>(b)]) ==
                    rel;
      }
      if (satisfies) {
        counts[static_cast<size_t>(
            ex.region_classes[static_cast<size_t>(r)])] += 1.0;
      }
    }
    real max_count = 0;
    for (real c : counts) max_count = std::max(max_count, c);
    if (max_count == 0) continue;  // cannot happen with the construction above
    qa.targets = counts;
    for (auto& t : qa.targets) t /= max_count;
    out.push_back(std::move(qa));
  }
  return out;
}

namespace {

std::vector<int64_t> class_word_positions(const TextInput& caption,
                                          const Vocabulary& vocab) {
  std::vector<int64_t> pos;
  for (int64_t i = 0; i < caption.length(); ++i) {
    if (vocab.class_of_word(caption.token_ids[static_cast<size_t>(i)]) >= 0) {
      pos.push_back(i);
    }
  }
  return pos;
}

std::vector<int64_t> relation_word_positions(const TextInput& caption,
                                             const Vocabulary& vocab) {
  std::vector<int64_t> pos;
  const int64_t first = vocab.relation_id(Relation::left_of);
  for (int64_t i = 0; i < caption.length(); ++i) {
    const int64_t id = caption.token_ids[static_cast<size_t>(i)];
    if (id >= first && id < first + 4) pos.push_back(i);
  }
  return pos;
}

int64_t flipped_relation_id(int64_t id, const Vocabulary& vocab) {
  if (id == vocab.relation_id(Relation::left_of)) {
    return vocab.relation_id(Relation::right_of);
  }
  if (id == vocab.relation_id(Relation::right_of)) {
    return vocab.relation_id(Relation::left_of);
  }
  if (id == vocab.relation_id(Relation::above)) {
    return vocab.relation_id(Relation::below);
  }
  return vocab.relation_id(Relation::above);
}

}  // namespace

std::vector<MultipleChoiceExample> derive_mc(
    std::span<const PairedExample> base, const GeneratorConfig& cfg,
    uint64_t seed) {
  const auto& vocab = cfg.vocab;
  std::vector<MultipleChoiceExample> out;
  out.reserve(base.size());
  for (const auto& ex : base) {
    Rng rng = Rng::stream(seed, static_cast<uint64_t>(ex.example_id));
    std::vector<uint8_t> present(static_cast<size_t>(cfg.num_region_classes),
                                 0);
    for (int64_t c : ex.region_classes) present[static_cast<size_t>(c)] = 1;
    std::vector<int64_t> absent;
    for (int64_t c = 0; c < cfg.num_region_classes; ++c) {
      if (!present[static_cast<size_t>(c)]) absent.push_back(c);
    }

    // candidate corruptions: every relation flip, and every class-word
    // position rewritten to every absent class
    std::vector<std::vector<int64_t>> candidates;
    for (int64_t p : relation_word_positions(ex.caption, vocab)) {
      auto ids = ex.caption.token_ids;
      ids[static_cast<size_t>(p)] =
          flipped_relation_id(ids[static_cast<size_t>(p)], vocab);
      candidates.push_back(std::move(ids));
    }
    for (int64_t p : class_word_positions(ex.caption, vocab)) {
      for (int64_t a : absent) {
        auto ids = ex.caption.token_ids;
        ids[static_cast<size_t>(p)] = vocab.class_word_id(a);
        candidates.push_back(std::move(ids));
      }
    }
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()),
                     candidates.end());
    if (candidates.size() < 3) continue;
    rng.shuffle(candidates);

    MultipleChoiceExample mc;
    mc.image = ex.image;
    mc.question = TextInput::from_ids({tokens::kCls, tokens::kSep});
    const int64_t true_slot = rng.uniform_int(4);
    mc.correct = true_slot;
    int64_t next_candidate = 0;
    for (int64_t slot = 0; slot < 4; ++slot) {
      if (slot == true_slot) {
        mc.options[static_cast<size_t>(slot)] = ex.caption;
      } else {
        mc.options[static_cast<size_t>(slot)] = TextInput::from_ids(
            std::vector<int64_t>(candidates[static_cast<size_t>(next_candidate)]));
        ++next_candidate;
      }
    }
    out.push_back(std::move(mc));
  }
  return out;
}

std::vector<RefExpExample> derive_refexp(std::span<const PairedExample> base,
                                         const GeneratorConfig& cfg,
                                         uint64_t seed) {
  const auto& vocab = cfg.vocab;
  std::vector<RefExpExample> out;
  out.reserve(base.size());
  for (const auto& ex : base) {
    const int64_t k = ex.image.num_regions();
    if (k < 2) continue;
    Rng rng = Rng::stream(seed, static_cast<uint64_t>(ex.example_id));
    const int64_t target = rng.uniform_int(k);
    int64_t other = rng.uniform_int(k - 1);
    if (other >= target) ++other;
    const Relation rel =
        relation_between(ex.image.boxes[static_cast<size_t>(target)],
                         ex.image.boxes[static_cast<size_t>(other)]);

    RefExpExample re;
    re.expression = TextInput::from_ids(
        {tokens::kCls, vocab.id_of("the"),
         vocab.class_word_id(ex.region_classes[static_cast<size_t>(target)]),
         vocab.relation_id(rel), vocab.id_of("the"),
         vocab.class_word_id(ex.region_classes[static_cast<size_t>(other)]),
         tokens::kSep});
    re.gt_box = ex.image.boxes[static_cast<size_t>(target)];

    // proposals: the scene boxes plus one jittered copy of each
    ImageInput& img = re.image;
    img.feature_dim = cfg.visual_feature_dim;
    img.num_classes = cfg.num_region_classes;
    img.boxes = ex.image.boxes;
    img.features = ex.image.features;
    img.detector_dist = ex.image.detector_dist;
    img.features.resize(static_cast<size_t>(2 * k * cfg.visual_feature_dim));
    img.detector_dist.resize(
        static_cast<size_t>(2 * k * cfg.num_region_classes));
    for (int64_t i = 0; i < k; ++i) {
      const auto& b = ex.image.boxes[static_cast<size_t>(i)];
      const real dx = rng.uniform(-0.08, 0.08);
      const real dy = rng.uniform(-0.08, 0.08);
      const real dw = rng.uniform(-0.04, 0.04);
      const real dh = rng.uniform(-0.04, 0.04);
      real x1 = std::clamp(b[0] + dx, 0.0, 0.9);
      real y1 = std::clamp(b[1] + dy, 0.0, 0.9);
      real x2 = std::clamp(b[2] + dx + dw, x1 + 0.05, 1.0);
      real y2 = std::clamp(b[3] + dy + dh, y1 + 0.05, 1.0);
      img.boxes.push_back({x1, y1, x2, y2});
      sample_region_channels(
          cfg, ex.region_classes[static_cast<size_t>(i)], rng,
          {img.features.data() + (k + i) * cfg.visual_feature_dim,
           static_cast<size_t>(cfg.visual_feature_dim)},
          {img.detector_dist.data() + (k + i) * cfg.num_region_classes,
           static_cast<size_t>(cfg.num_region_classes)});
    }
    img.rebuild_spatial5();
    img.validate();
    out.push_back(std::move(re));
  }
  return out;
}

RetrievalPool make_retrieval_pool(std::span<const PairedExample> base,
                                  int64_t limit) {
  RetrievalPool pool;
  const int64_t n = limit < 0
                        ? static_cast<int64_t>(base.size())
                        : std::min<int64_t>(limit, static_cast<int64_t>(base.size()));
  if (n < 2) throw ContractError("retrieval pool needs at least 2 pairs");
  pool.images.reserve(static_cast<size_t>(n));
  pool.captions.reserve(static_cast<size_t>(n));
  pool.mean_features.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const auto& ex = base[static_cast<size_t>(i)];
    pool.images.push_back(ex.image);
    pool.captions.push_back(ex.caption);
    std::vector<real> mean(static_cast<size_t>(ex.image.feature_dim), 0.0);
    for (int64_t r = 0; r < ex.image.num_regions(); ++r) {
      const auto row = ex.image.feature_row(r);
      for (size_t j = 0; j < mean.size(); ++j) mean[j] += row[j];
    }
    for (auto& v : mean) v /= static_cast<real>(ex.image.num_regions());
    pool.mean_features.push_back(std::move(mean));
  }
  return pool;
}

// ---- task dataset files -------------------------------------------------------

namespace {

void append_ids(std::string& line, std::span<const int64_t> ids) {
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) line += ',';
    line += std::to_string(ids[i]);
  }
}

void append_reals(std::string& line, std::span<const real> vals,
                  int64_t stride) {
  for (size_t i = 0; i < vals.size(); ++i) {
    if (i) {
      line += (stride > 0 && i % static_cast<size_t>(stride) == 0) ? ';' : ',';
    }
    line += format_real(vals[i]);
  }
}

void append_image_fields(std::string& line, const ImageInput& img) {
  line += " boxes=";
  for (size_t i = 0; i < img.boxes.size(); ++i) {
    if (i) line += ';';
    const auto& b = img.boxes[i];
    line += format_real(b[0]) + "," + format_real(b[1]) + "," +
            format_real(b[2]) + "," + format_real(b[3]);
  }
  line += " features=";
  append_reals(line, img.features, img.feature_dim);
  line += " det=";
  append_reals(line, img.detector_dist, img.num_classes);
}

struct RecordFields {
  std::vector<std::pair<std::string_view, std::string_view>> kv;
  std::string_view get(const char* key) const {
    for (const auto& [k, v] : kv) {
      if (k == key) return v;
    }
    throw ParseError(std::string("missing field '") + key + "'");
  }
  bool has(const char* key) const {
    for (const auto& [k, v] : kv) {
      if (k == key) return true;
    }
    return false;
  }
};

RecordFields parse_record(std::string_view line) {
  RecordFields rec;
  for (auto field : split(line, ' ')) {
    if (field.empty()) continue;
    const size_t eq = field.find('=');
    if (eq == std::string_view::npos) throw ParseError("field without '='");
    rec.kv.emplace_back(field.substr(0, eq), field.substr(eq + 1));
  }
  return rec;
}

std::vector<int64_t> parse_ids(std::string_view s) {
  std::vector<int64_t> out;
  for (auto part : split(s, ',')) out.push_back(parse_int(part));
  return out;
}

std::vector<real> parse_reals(std::string_view s) {
  std::vector<real> out;
  for (auto row : split(s, ';')) {
    for (auto cell : split(row, ',')) out.push_back(parse_real(cell));
  }
  return out;
}

ImageInput parse_image_fields(const RecordFields& rec, int64_t num_classes,
                              int64_t feature_dim) {
  ImageInput img;
  img.num_classes = num_classes;
  img.feature_dim = feature_dim;
  for (auto b : split(rec.get("boxes"), ';')) {
    auto coords = split(b, ',');
    if (coords.size() != 4) throw ParseError("box needs 4 coords");
    img.boxes.push_back({parse_real(coords[0]), parse_real(coords[1]),
                         parse_real(coords[2]), parse_real(coords[3])});
  }
  img.features = parse_reals(rec.get("features"));
  img.detector_dist = parse_reals(rec.get("det"));
  img.rebuild_spatial5();
  img.validate();
  return img;
}

void write_task_header(std::ofstream& out, const char* task, size_t n,
                       int64_t num_classes, int64_t feature_dim) {
  out << "vilbert-task task=" << task << " version=1 n=" << n
      << " classes=" << num_classes << " feature_dim=" << feature_dim << "\n";
}

struct TaskHeader {
  std::string task;
  int64_t n = 0;
  int64_t num_classes = 0;
  int64_t feature_dim = 0;
};

TaskHeader parse_task_header(const std::string& line, const char* expect_task,
                             const std::string& path) {
  auto fields = split(line, ' ');
  if (fields.empty() || fields[0] != "vilbert-task") {
    throw ParseError(path + ": line 1: not a task dataset file");
  }
  TaskHeader h;
  for (size_t i = 1; i < fields.size(); ++i) {
    auto kv = split(fields[i], '=');
    if (kv.size() != 2) throw ParseError(path + ": line 1: malformed header");
    const std::string key(kv[0]);
    if (key == "task") h.task = std::string(kv[1]);
    else if (key == "version") {
      if (parse_int(kv[1]) != 1) {
        throw ParseError(path + ": line 1: unsupported version");
      }
    } else if (key == "n") h.n = parse_int(kv[1]);
    else if (key == "classes") h.num_classes = parse_int(kv[1]);
    else if (key == "feature_dim") h.feature_dim = parse_int(kv[1]);
    else throw ParseError(path + ": line 1: unknown header field '" + key + "'");
  }
  if (h.task != expect_task) {
    throw ParseError(path + ": task '" + h.task + "' does not match expected '" +
                     expect_task + "'");
  }
  return h;
}

template <typename Fn>
void for_each_record(const std::string& path, Fn&& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::string line;
  if (!std::getline(in, line)) {
    throw ParseError(path + ": empty task dataset file");
  }
  int64_t line_no = 1, last_good = 1;
  std::string header = line;
  std::vector<std::string> body;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      fn(header, line);
      last_good = line_no;
    } catch (const ContractError& e) {
      throw ParseError(path + ": line " + std::to_string(line_no) + ": " +
                       e.what() + " (last good line " +
                       std::to_string(last_good) + ")");
    }
  }
}

}  // namespace

void write_vqa_dataset(const std::string& path,
                       std::span<const QAExample> examples,
                       int64_t num_classes, int64_t feature_dim) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  write_task_header(out, "vqa", examples.size(), num_classes, feature_dim);
  std::string line;
  for (const auto& ex : examples) {
    line.clear();
    line += "question=";
    append_ids(line, ex.question.token_ids);
    line += " targets=";
    append_reals(line, ex.targets, 0);
    append_image_fields(line, ex.image);
    out << line << "\n";
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

std::vector<QAExample> load_vqa_dataset(const std::string& path) {
  std::vector<QAExample> out;
  TaskHeader h;
  bool have_header = false;
  for_each_record(path, [&](const std::string& header, const std::string& line) {
    if (!have_header) {
      h = parse_task_header(header, "vqa", path);
      have_header = true;
    }
    auto rec = parse_record(line);
    QAExample ex;
    ex.question = TextInput::from_ids(parse_ids(rec.get("question")));
    ex.targets = parse_reals(rec.get("targets"));
    if (static_cast<int64_t>(ex.targets.size()) != h.num_classes) {
      throw ParseError("targets length does not match class count");
    }
    ex.image = parse_image_fields(rec, h.num_classes, h.feature_dim);
    out.push_back(std::move(ex));
  });
  if (!have_header) parse_task_header("", "vqa", path);
  if (h.n != static_cast<int64_t>(out.size())) {
    throw ParseError(path + ": header says n=" + std::to_string(h.n) +
                     " but found " + std::to_string(out.size()));
  }
  return out;
}

void write_mc_dataset(const std::string& path,
                      std::span<const MultipleChoiceExample> examples,
                      int64_t num_classes, int64_t feature_dim) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  write_task_header(out, "mc", examples.size(), num_classes, feature_dim);
  std::string line;
  for (const auto& ex : examples) {
    line.clear();
    line += "question=";
    append_ids(line, ex.question.token_ids);
    for (int i = 0; i < 4; ++i) {
      line += " opt" + std::to_string(i) + "=";
      append_ids(line, ex.options[static_cast<size_t>(i)].token_ids);
    }
    line += " correct=" + std::to_string(ex.correct);
    append_image_fields(line, ex.image);
    out << line << "\n";
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

std::vector<MultipleChoiceExample> load_mc_dataset(const std::string& path) {
  std::vector<MultipleChoiceExample> out;
  TaskHeader h;
  bool have_header = false;
  for_each_record(path, [&](const std::string& header, const std::string& line) {
    if (!have_header) {
      h = parse_task_header(header, "mc", path);
      have_header = true;
    }
    auto rec = parse_record(line);
    MultipleChoiceExample ex;
    ex.question = TextInput::from_ids(parse_ids(rec.get("question")));
    for (int i = 0; i < 4; ++i) {
      const std::string key = "opt" + std::to_string(i);
      ex.options[static_cast<size_t>(i)] =
          TextInput::from_ids(parse_ids(rec.get(key.c_str())));
    }
    ex.correct = parse_int(rec.get("correct"));
    if (ex.correct < 0 || ex.correct >= 4) {
      throw ParseError("correct index out of range");
    }
    ex.image = parse_image_fields(rec, h.num_classes, h.feature_dim);
    out.push_back(std::move(ex));
  });
  if (h.n != static_cast<int64_t>(out.size())) {
    throw ParseError(path + ": header says n=" + std::to_string(h.n) +
                     " but found " + std::to_string(out.size()));
  }
  return out;
}

void write_refexp_dataset(const std::string& path,
                          std::span<const RefExpExample> examples,
                          int64_t num_classes, int64_t feature_dim) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  write_task_header(out, "refexp", examples.size(), num_classes, feature_dim);
  std::string line;
  for (const auto& ex : examples) {
    line.clear();
    line += "expr=";
    append_ids(line, ex.expression.token_ids);
    line += " gt=" + format_real(ex.gt_box[0]) + "," +
            format_real(ex.gt_box[1]) + "," + format_real(ex.gt_box[2]) + "," +
            format_real(ex.gt_box[3]);
    append_image_fields(line, ex.image);
    out << line << "\n";
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

std::vector<RefExpExample> load_refexp_dataset(const std::string& path) {
  std::vector<RefExpExample> out;
  TaskHeader h;
  bool have_header = false;
  for_each_record(path, [&](const std::string& header, const std::string& line) {
    if (!have_header) {
      h = parse_task_header(header, "refexp", path);
      have_header = true;
    }
    auto rec = parse_record(line);
    RefExpExample ex;
    ex.expression = TextInput::from_ids(parse_ids(rec.get("expr")));
    auto gt = parse_reals(rec.get("gt"));
    if (gt.size() != 4) throw ParseError("gt box needs 4 coords");
    ex.gt_box = {gt[0], gt[1], gt[2], gt[3]};
    ex.image = parse_image_fields(rec, h.num_classes, h.feature_dim);
    out.push_back(std::move(ex));
  });
  if (h.n != static_cast<int64_t>(out.size())) {
    throw ParseError(path + ": header says n=" + std::to_string(h.n) +
                     " but found " + std::to_string(out.size()));
  }
  return out;
}

// ---- task heads ---------------------------------------------------------------

VqaHead::VqaHead(const ModelConfig& cfg, int64_t num_answers, uint64_t seed,
                 ParamMap& params) {
  if (num_answers < 1) throw ContractError("need at least one answer");
  Rng rng = Rng::stream(seed, fnv1a64("vqa-head"));
  const int64_t hidden = 2 * cfg.pooled_dim;
  w1 = params.add("task.vqa.w1",
                  Tensor::randn({cfg.pooled_dim, hidden}, rng, kInitStd));
  b1 = params.add("task.vqa.b1", Tensor::zeros({hidden}));
  w2 = params.add("task.vqa.w2",
                  Tensor::randn({hidden, num_answers}, rng, kInitStd));
  b2 = params.add("task.vqa.b2", Tensor::zeros({num_answers}));
}

Tensor vqa_logits(const StreamOutputs& out, const PretrainHeads& pool,
                  const VqaHead& head) {
  const Tensor prod = pooled_product(out.h_img, out.h_cls, pool);
  const Tensor hidden = gelu(add(matmul(prod, head.w1), head.b1));
  return add(matmul(hidden, head.w2), head.b2);
}

McHead::McHead(const ModelConfig& cfg, uint64_t seed, ParamMap& params) {
  Rng rng = Rng::stream(seed, fnv1a64("mc-head"));
  w = params.add("task.mc.w", Tensor::randn({cfg.pooled_dim, 1}, rng, kInitStd));
  b = params.add("task.mc.b", Tensor::zeros({1}));
}

Tensor mc_logit(const StreamOutputs& out, const PretrainHeads& pool,
                const McHead& head) {
  const Tensor prod = pooled_product(out.h_img, out.h_cls, pool);
  return add(matmul(prod, head.w), head.b);
}

RefExpHead::RefExpHead(const ModelConfig& cfg, uint64_t seed,
                       ParamMap& params) {
  Rng rng = Rng::stream(seed, fnv1a64("refexp-head"));
  w = params.add("task.refexp.w",
                 Tensor::randn({cfg.visual_dim, 1}, rng, kInitStd));
  b = params.add("task.refexp.b", Tensor::zeros({1}));
}

Tensor refexp_scores(const StreamOutputs& out, const RefExpHead& head) {
  const Tensor regions = slice_rows(out.h_v, 1, out.h_v.rows());
  return add(matmul(regions, head.w), head.b);
}

std::vector<uint8_t> refexp_labels(const RefExpExample& ex) {
  std::vector<uint8_t> labels;
  labels.reserve(ex.image.boxes.size());
  for (const auto& b : ex.image.boxes) {
    labels.push_back(iou(b, ex.gt_box) >= 0.5 ? 1 : 0);
  }
  return labels;
}

TextInput concat_question_option(const TextInput& question,
                                 const TextInput& option,
                                 int64_t max_text_len) {
  std::vector<int64_t> ids;
  ids.push_back(tokens::kCls);
  for (size_t i = 1; i + 1 < question.token_ids.size(); ++i) {
    ids.push_back(question.token_ids[i]);
  }
  for (size_t i = 1; i + 1 < option.token_ids.size(); ++i) {
    ids.push_back(option.token_ids[i]);
  }
  ids.push_back(tokens::kSep);
  if (static_cast<int64_t>(ids.size()) > max_text_len) {
    ids.resize(static_cast<size_t>(max_text_len) - 1);
    ids.push_back(tokens::kSep);
  }
  return TextInput::from_ids(std::move(ids));
}

// ---- retrieval ------------------------------------------------------------------

std::vector<std::vector<int32_t>> nearest_neighbor_images(
    const RetrievalPool& pool, int64_t k) {
  const int64_t n = pool.size();
  if (k < 1 || k > n - 1) {
    throw ContractError("nearest-neighbor count must be in [1, pool-1]");
  }
  std::vector<std::vector<int32_t>> knn(static_cast<size_t>(n));
  std::vector<std::pair<real, int32_t>> dist;
  for (int64_t i = 0; i < n; ++i) {
    dist.clear();
    dist.reserve(static_cast<size_t>(n - 1));
    const auto& fi = pool.mean_features[static_cast<size_t>(i)];
    for (int64_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const auto& fj = pool.mean_features[static_cast<size_t>(j)];
      real d2 = 0;
      for (size_t c = 0; c < fi.size(); ++c) {
        const real d = fi[c] - fj[c];
        d2 += d * d;
      }
      dist.emplace_back(d2, static_cast<int32_t>(j));
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<long>(k),
                      dist.end());
    auto& row = knn[static_cast<size_t>(i)];
    row.reserve(static_cast<size_t>(k));
    for (int64_t j = 0; j < k; ++j) {
      row.push_back(dist[static_cast<size_t>(j)].second);
    }
  }
  return knn;
}

RetrievalInstance retrieval_finetune_instance(
    int64_t index, const RetrievalPool& pool,
    const std::vector<std::vector<int32_t>>& knn, Rng& rng) {
  const int64_t n = pool.size();
  if (n < 2) throw ContractError("retrieval pool too small for distractors");
  if (index < 0 || index >= n) throw IndexError("pool index out of range");
  const auto& neighbors = knn[static_cast<size_t>(index)];
  if (neighbors.empty()) {
    throw ContractError("no hard-negative neighbors for pool item");
  }
  auto other = [&]() {
    int64_t j = rng.uniform_int(n - 1);
    return j >= index ? j + 1 : j;
  };
  RetrievalInstance inst;
  inst.caption_of = {index, other(), index, index};
  inst.image_of = {index, index, other(),
                   neighbors[static_cast<size_t>(rng.uniform_int(
                       static_cast<int64_t>(neighbors.size())))]};
  return inst;
}

RecallReport recall_from_scores(const std::vector<std::vector<real>>& scores) {
  const int64_t n = static_cast<int64_t>(scores.size());
  if (n == 0) throw ContractError("empty score matrix");
  RecallReport rep;
  for (int64_t c = 0; c < n; ++c) {
    const auto& row = scores[static_cast<size_t>(c)];
    if (static_cast<int64_t>(row.size()) != n) {
      throw DimensionError("score matrix must be square");
    }
    const real gold = row[static_cast<size_t>(c)];
    int64_t rank = 1;
    for (int64_t j = 0; j < n; ++j) {
      if (j == c) continue;
      if (row[static_cast<size_t>(j)] > gold ||
          (row[static_cast<size_t>(j)] == gold && j < c)) {
        ++rank;
      }
    }
    rep.r1 += rank <= 1 ? 1.0 : 0.0;
    rep.r5 += rank <= 5 ? 1.0 : 0.0;
    rep.r10 += rank <= 10 ? 1.0 : 0.0;
  }
  rep.r1 /= static_cast<real>(n);
  rep.r5 /= static_cast<real>(n);
  rep.r10 /= static_cast<real>(n);
  return rep;
}

std::vector<std::vector<real>> retrieval_score_matrix(
    const RetrievalPool& pool, const VilbertModel& model,
    const PretrainHeads& heads, bool use_text_cache) {
  const int64_t n = pool.size();
  std::vector<std::vector<real>> scores(
      static_cast<size_t>(n), std::vector<real>(static_cast<size_t>(n), 0.0));
  const bool cache =
      use_text_cache &&
      model.config().architecture == Architecture::two_stream;
  for (int64_t c = 0; c < n; ++c) {
    Tensor prefix;
    if (cache) {
      prefix = model.text_prefix_states(pool.captions[static_cast<size_t>(c)])
                   .detach();
    }
    for (int64_t i = 0; i < n; ++i) {
      const StreamOutputs out =
          cache ? model.forward_from_text_prefix(
                      prefix, pool.images[static_cast<size_t>(i)])
                : model.forward(pool.captions[static_cast<size_t>(c)],
                                pool.images[static_cast<size_t>(i)]);
      scores[static_cast<size_t>(c)][static_cast<size_t>(i)] =
          alignment_logit(out.h_img, out.h_cls, heads).item();
    }
  }
  return scores;
}

RecallReport evaluate_retrieval(const RetrievalPool& pool,
                                const VilbertModel& model,
                                const PretrainHeads& heads,
                                bool use_text_cache) {
  return recall_from_scores(
      retrieval_score_matrix(pool, model, heads, use_text_cache));
}

// ---- evaluation ------------------------------------------------------------------

real evaluate_vqa(std::span<const QAExample> examples,
                  const VilbertModel& model, const PretrainHeads& pool,
                  const VqaHead& head) {
  if (examples.empty()) throw ContractError("no examples to evaluate");
  real score = 0;
  for (const auto& ex : examples) {
    const StreamOutputs out = model.forward(ex.question, ex.image);
    const Tensor logits = vqa_logits(out, pool, head);
    int64_t best = 0;
    for (int64_t a = 1; a < logits.numel(); ++a) {
      if (logits.at(0, a) > logits.at(0, best)) best = a;
    }
    score += ex.targets[static_cast<size_t>(best)];
  }
  return score / static_cast<real>(examples.size());
}

std::array<real, 4> multiple_choice_scores(const MultipleChoiceExample& ex,
                                           const VilbertModel& model,
                                           const PretrainHeads& pool,
                                           const McHead& head) {
  std::array<real, 4> logits{};
  for (int i = 0; i < 4; ++i) {
    const TextInput text =
        concat_question_option(ex.question, ex.options[static_cast<size_t>(i)],
                               model.config().max_text_len);
    const StreamOutputs out = model.forward(text, ex.image);
    logits[static_cast<size_t>(i)] = mc_logit(out, pool, head).item();
  }
  real maxv = logits[0];
  for (real l : logits) maxv = std::max(maxv, l);
  real sum = 0;
  std::array<real, 4> probs{};
  for (size_t i = 0; i < 4; ++i) {
    probs[i] = std::exp(logits[i] - maxv);
    sum += probs[i];
  }
  for (auto& p : probs) p /= sum;
  return probs;
}

real evaluate_mc(std::span<const MultipleChoiceExample> examples,
                 const VilbertModel& model, const PretrainHeads& pool,
                 const McHead& head) {
  if (examples.empty()) throw ContractError("no examples to evaluate");
  int64_t correct = 0;
  for (const auto& ex : examples) {
    const auto probs = multiple_choice_scores(ex, model, pool, head);
    int64_t best = 0;
    for (int64_t i = 1; i < 4; ++i) {
      if (probs[static_cast<size_t>(i)] > probs[static_cast<size_t>(best)]) {
        best = i;
      }
    }
    if (best == ex.correct) ++correct;
  }
  return static_cast<real>(correct) / static_cast<real>(examples.size());
}

real evaluate_refexp(std::span<const RefExpExample> examples,
                     const VilbertModel& model, const RefExpHead& head) {
  if (examples.empty()) throw ContractError("no examples to evaluate");
  int64_t hits = 0;
  for (const auto& ex : examples) {
    const StreamOutputs out = model.forward(ex.expression, ex.image);
    const Tensor scores = refexp_scores(out, head);
    int64_t best = 0;
    for (int64_t i = 1; i < scores.rows(); ++i) {
      if (scores.at(i, 0) > scores.at(best, 0)) best = i;
    }
    if (iou(ex.image.boxes[static_cast<size_t>(best)], ex.gt_box) >= 0.5) {
      ++hits;
    }
  }
  return static_cast<real>(hits) / static_cast<real>(examples.size());
}

// ---- caption sampling ----------------------------------------------------------

TextInput sample_caption(const VilbertModel& model, const PretrainHeads& heads,
                         const ImageInput& image, int64_t length,
                         int64_t steps, Rng& rng) {
  if (length < 1) throw ContractError("caption length must be positive");
  if (length + 2 > model.config().max_text_len) {
    throw ContractError("caption length exceeds max_text_len");
  }
  if (steps < 0) throw ContractError("steps must be non-negative");
  std::vector<int64_t> ids(static_cast<size_t>(length + 2), tokens::kMask);
  ids.front() = tokens::kCls;
  ids.back() = tokens::kSep;
  TextInput text = TextInput::from_ids(std::move(ids));

  const int64_t vocab = model.config().text_vocab_size;
  std::vector<real> probs(static_cast<size_t>(vocab));
  for (int64_t step = 0; step < steps; ++step) {
    const int64_t pos = 1 + (step % length);
    text.token_ids[static_cast<size_t>(pos)] = tokens::kMask;
    const StreamOutputs out = model.forward(text, image);
    const Tensor state = slice_rows(out.h_w, pos, pos + 1);
    const Tensor logits = add(matmul(state, heads.lm_w), heads.lm_b);
    // sample over non-special tokens only, temperature 1
    real maxv = -1e300;
    for (int64_t t = tokens::kNumSpecial; t < vocab; ++t) {
      maxv = std::max(maxv, logits.at(0, t));
    }
    real sum = 0;
    for (int64_t t = tokens::kNumSpecial; t < vocab; ++t) {
      probs[static_cast<size_t>(t)] = std::exp(logits.at(0, t) - maxv);
      sum += probs[static_cast<size_t>(t)];
    }
    const real u = rng.uniform() * sum;
    real acc = 0;
    int64_t chosen = vocab - 1;
    for (int64_t t = tokens::kNumSpecial; t < vocab; ++t) {
      acc += probs[static_cast<size_t>(t)];
      if (u < acc) {
        chosen = t;
        break;
      }
    }
    text.token_ids[static_cast<size_t>(pos)] = chosen;
  }
  return text;
}

}  // namespace vilbert
