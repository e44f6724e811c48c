// SPDX-License-Identifier: Apache-2.0
#include "vilbert/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace vilbert {

namespace {

constexpr const char* kTemplateWords[] = {"the", "is", "in", "scene", "and",
                                          "what"};

constexpr const char* kClassWords[] = {"cat",   "dog",  "car",   "tree",
                                       "bird",  "house", "boat",  "chair",
                                       "lamp",  "fish",  "horse", "plane",
                                       "cup",   "book",  "ball",  "star"};

// filler nouns: legal targets for random-word masking, never used by the
// caption templates
constexpr const char* kFillerWords[] = {
    "apple",  "river",  "stone",  "cloud",  "grass",  "door",   "wall",
    "road",   "train",  "bridge", "field",  "light",  "night",  "paper",
    "glass",  "table",  "floor",  "shirt",  "shoe",   "clock",  "phone",
    "bread",  "fruit",  "plant",  "water",  "smoke",  "sound",  "stick",
    "leaf",   "root",   "sand",   "snow",   "rain",   "wind",   "fire",
    "metal",  "wood",   "brick",  "wheel",  "rope",   "box",    "bag",
    "coin",   "key",    "lock",   "ring",   "band",   "card",   "page",
    "desk",   "bench",  "fence",  "gate",   "pond",   "hill",   "cave",
    "path",   "trail",  "shore",  "wave",   "cliff",  "peak",   "valley",
    "meadow", "forest", "garden", "market", "street", "corner", "tower",
    "roof",   "window", "stair",  "cellar", "attic",  "porch",  "yard",
    "barn",   "mill",   "well",   "dock",   "pier",   "sail",   "mast",
    "anchor", "engine", "signal", "track",  "tunnel", "lantern"};

real quantize6(real v) { return std::round(v * 1e6) / 1e6; }

}  // namespace

std::string relation_word(Relation r) {
  switch (r) {
    case Relation::left_of: return "left_of";
    case Relation::right_of: return "right_of";
    case Relation::above: return "above";
    case Relation::below: return "below";
  }
  throw ContractError("invalid relation");
}

Relation relation_between(const std::array<real, 4>& a,
                          const std::array<real, 4>& b) {
  const real dx = 0.5 * (a[0] + a[2]) - 0.5 * (b[0] + b[2]);
  const real dy = 0.5 * (a[1] + a[3]) - 0.5 * (b[1] + b[3]);
  if (std::abs(dx) >= std::abs(dy)) {
    return dx < 0 ? Relation::left_of : Relation::right_of;
  }
  return dy < 0 ? Relation::above : Relation::below;
}

int64_t Vocabulary::id_of(const std::string& w) const {
  auto it = ids.find(w);
  if (it == ids.end()) {
    throw IndexError("word '" + w + "' not in vocabulary");
  }
  return it->second;
}

int64_t Vocabulary::class_word_id(int64_t cls) const {
  if (cls < 0 || cls >= num_classes) {
    throw IndexError("class " + std::to_string(cls) + " out of range [0," +
                     std::to_string(num_classes) + ")");
  }
  return first_class_word + cls;
}

int64_t Vocabulary::class_of_word(int64_t id) const {
  if (id >= first_class_word && id < first_class_word + num_classes) {
    return id - first_class_word;
  }
  return -1;
}

int64_t Vocabulary::relation_id(Relation r) const {
  return id_of(relation_word(r));
}

const std::string& Vocabulary::word(int64_t id) const {
  if (id < 0 || id >= size()) {
    throw IndexError("token id " + std::to_string(id) +
                     " out of range [0," + std::to_string(size()) + ")");
  }
  return words[static_cast<size_t>(id)];
}

Vocabulary Vocabulary::build(int64_t num_classes, int64_t filler_words) {
  if (num_classes < 1) throw ContractError("need at least one region class");
  Vocabulary v;
  v.num_classes = num_classes;
  v.words = {"[PAD]", "[CLS]", "[SEP]", "[MASK]"};
  for (const char* w : kTemplateWords) v.words.emplace_back(w);
  for (Relation r : {Relation::left_of, Relation::right_of, Relation::above,
                     Relation::below}) {
    v.words.push_back(relation_word(r));
  }
  v.first_class_word = static_cast<int64_t>(v.words.size());
  const int64_t named = static_cast<int64_t>(std::size(kClassWords));
  for (int64_t c = 0; c < num_classes; ++c) {
    if (c < named) {
      v.words.emplace_back(kClassWords[c]);
    } else {
      v.words.push_back("obj" + std::to_string(c));
    }
  }
  const int64_t avail = static_cast<int64_t>(std::size(kFillerWords));
  for (int64_t i = 0; i < filler_words; ++i) {
    if (i < avail) {
      v.words.emplace_back(kFillerWords[i]);
    } else {
      v.words.push_back("w" + std::to_string(i));
    }
  }
  for (size_t i = 0; i < v.words.size(); ++i) {
    if (!v.ids.emplace(v.words[i], static_cast<int64_t>(i)).second) {
      throw ContractError("duplicate vocabulary word '" + v.words[i] + "'");
    }
  }
  return v;
}

void GeneratorConfig::validate() const {
  if (num_region_classes < 1 || visual_feature_dim < 1) {
    throw ContractError("generator class/feature extents must be positive");
  }
  if (feature_noise_sigma < 0 || detector_noise_sigma < 0) {
    throw ContractError("noise sigmas must be non-negative");
  }
  if (detector_temperature <= 0) {
    throw ContractError("detector temperature must be positive");
  }
  if (min_regions < 1 || max_regions < min_regions) {
    throw ContractError("invalid regions_per_scene range");
  }
  if (triple_prob < 0 || triple_prob > 1) {
    throw ContractError("triple_prob must be in [0,1]");
  }
  if (caption_template_set.empty()) {
    throw ContractError("caption_template_set must not be empty");
  }
  for (const auto& t : caption_template_set) {
    if (t != "single" && t != "pair" && t != "triple") {
      throw ContractError("unknown caption template '" + t + "'");
    }
  }
  if (max_text_len < 15) {
    // the longest template is 13 tokens plus CLS/SEP
    throw ContractError("max_text_len must be at least 15");
  }
}

void GeneratorConfig::finalize() {
  validate();
  vocab = Vocabulary::build(num_region_classes, filler_words);
  prototypes.assign(
      static_cast<size_t>(num_region_classes * visual_feature_dim), 0.0);
  Rng rng = Rng::stream(seed, fnv1a64("prototypes"));
  for (int64_t c = 0; c < num_region_classes; ++c) {
    real norm2 = 0;
    real* row = prototypes.data() + c * visual_feature_dim;
    for (int64_t j = 0; j < visual_feature_dim; ++j) {
      row[j] = rng.normal();
      norm2 += row[j] * row[j];
    }
    const real inv = 1.0 / std::sqrt(norm2);
    for (int64_t j = 0; j < visual_feature_dim; ++j) row[j] *= inv;
  }
}

std::span<const real> GeneratorConfig::prototype(int64_t cls) const {
  if (!finalized()) throw ContractError("generator config not finalized");
  if (cls < 0 || cls >= num_region_classes) {
    throw IndexError("class " + std::to_string(cls) + " out of range");
  }
  return {prototypes.data() + cls * visual_feature_dim,
          static_cast<size_t>(visual_feature_dim)};
}

std::vector<std::pair<std::string, std::string>> GeneratorConfig::to_kv()
    const {
  std::vector<std::pair<std::string, std::string>> kv;
  kv.emplace_back("num_region_classes", std::to_string(num_region_classes));
  kv.emplace_back("visual_feature_dim", std::to_string(visual_feature_dim));
  kv.emplace_back("feature_noise_sigma", format_real(feature_noise_sigma));
  kv.emplace_back("detector_temperature", format_real(detector_temperature));
  kv.emplace_back("detector_noise_sigma", format_real(detector_noise_sigma));
  kv.emplace_back("detector_logit_scale", format_real(detector_logit_scale));
  kv.emplace_back("min_regions", std::to_string(min_regions));
  kv.emplace_back("max_regions", std::to_string(max_regions));
  std::string templates;
  for (size_t i = 0; i < caption_template_set.size(); ++i) {
    if (i) templates += ",";
    templates += caption_template_set[i];
  }
  kv.emplace_back("caption_template_set", templates);
  kv.emplace_back("triple_prob", format_real(triple_prob));
  kv.emplace_back("max_text_len", std::to_string(max_text_len));
  kv.emplace_back("filler_words", std::to_string(filler_words));
  kv.emplace_back("seed", std::to_string(seed));
  return kv;
}

GeneratorConfig GeneratorConfig::from_kv(
    const std::vector<std::pair<std::string, std::string>>& kv) {
  GeneratorConfig cfg;
  for (const auto& [k, v] : kv) {
    if (k == "num_region_classes") cfg.num_region_classes = parse_int(v);
    else if (k == "visual_feature_dim") cfg.visual_feature_dim = parse_int(v);
    else if (k == "feature_noise_sigma") cfg.feature_noise_sigma = parse_real(v);
    else if (k == "detector_temperature") cfg.detector_temperature = parse_real(v);
    else if (k == "detector_noise_sigma") cfg.detector_noise_sigma = parse_real(v);
    else if (k == "detector_logit_scale") cfg.detector_logit_scale = parse_real(v);
    else if (k == "min_regions") cfg.min_regions = parse_int(v);
    else if (k == "max_regions") cfg.max_regions = parse_int(v);
    else if (k == "caption_template_set") {
      cfg.caption_template_set.clear();
      for (auto part : split(v, ',')) {
        if (!part.empty()) cfg.caption_template_set.emplace_back(part);
      }
    } else if (k == "triple_prob") cfg.triple_prob = parse_real(v);
    else if (k == "max_text_len") cfg.max_text_len = parse_int(v);
    else if (k == "filler_words") cfg.filler_words = parse_int(v);
    else if (k == "seed") cfg.seed = static_cast<uint64_t>(parse_int(v));
    else throw ParseError("unknown generator config key '" + k + "'");
  }
  cfg.finalize();
  return cfg;
}

uint64_t GeneratorConfig::digest() const {
  Fnv1a64 h;
  for (const auto& [k, v] : to_kv()) {
    h.update(k);
    h.update("=");
    h.update(v);
    h.update("\n");
  }
  return h.digest();
}

void sample_region_channels(const GeneratorConfig& cfg, int64_t cls, Rng& rng,
                            std::span<real> feature_out,
                            std::span<real> det_out) {
  if (static_cast<int64_t>(feature_out.size()) != cfg.visual_feature_dim ||
      static_cast<int64_t>(det_out.size()) != cfg.num_region_classes) {
    throw DimensionError("region channel buffers have wrong sizes");
  }
  const auto proto = cfg.prototype(cls);
  for (int64_t j = 0; j < cfg.visual_feature_dim; ++j) {
    real f = proto[static_cast<size_t>(j)];
    if (cfg.feature_noise_sigma > 0) {
      f += rng.normal(0.0, cfg.feature_noise_sigma);
    }
    feature_out[static_cast<size_t>(j)] = quantize6(f);
  }
  std::vector<real> logits(static_cast<size_t>(cfg.num_region_classes), 0.0);
  logits[static_cast<size_t>(cls)] = cfg.detector_logit_scale;
  if (cfg.detector_noise_sigma > 0) {
    for (auto& l : logits) l += rng.normal(0.0, cfg.detector_noise_sigma);
  }
  real maxv = logits[0];
  for (real l : logits) maxv = std::max(maxv, l);
  real sum = 0;
  for (auto& l : logits) {
    l = std::exp((l - maxv) / cfg.detector_temperature);
    sum += l;
  }
  for (size_t c = 0; c < logits.size(); ++c) det_out[c] = logits[c] / sum;
}

GeneratedScene generate_scene(const GeneratorConfig& cfg, Rng& rng) {
  if (!cfg.finalized()) throw ContractError("generator config not finalized");
  GeneratedScene scene;
  const int64_t k =
      cfg.min_regions + rng.uniform_int(cfg.max_regions - cfg.min_regions + 1);
  ImageInput& img = scene.image;
  img.feature_dim = cfg.visual_feature_dim;
  img.num_classes = cfg.num_region_classes;
  img.features.resize(static_cast<size_t>(k * cfg.visual_feature_dim));
  img.detector_dist.resize(static_cast<size_t>(k * cfg.num_region_classes));
  for (int64_t i = 0; i < k; ++i) {
    // box with side >= 0.05, clipped to the unit square
    const real x1 = rng.uniform(0.0, 0.95);
    const real x2 = std::min(1.0, x1 + rng.uniform(0.05, 0.6));
    const real y1 = rng.uniform(0.0, 0.95);
    const real y2 = std::min(1.0, y1 + rng.uniform(0.05, 0.6));
    img.boxes.push_back({quantize6(x1), quantize6(y1), quantize6(x2),
                         quantize6(y2)});

    const int64_t cls = rng.uniform_int(cfg.num_region_classes);
    scene.classes.push_back(cls);
    sample_region_channels(
        cfg, cls, rng,
        {img.features.data() + i * cfg.visual_feature_dim,
         static_cast<size_t>(cfg.visual_feature_dim)},
        {img.detector_dist.data() + i * cfg.num_region_classes,
         static_cast<size_t>(cfg.num_region_classes)});
  }
  img.rebuild_spatial5();
  img.validate();
  return scene;
}

namespace {

std::vector<int64_t> pick_distinct(int64_t n, int64_t count, Rng& rng) {
  std::vector<int64_t> pool(static_cast<size_t>(n));
  std::iota(pool.begin(), pool.end(), 0);
  rng.shuffle(pool);
  pool.resize(static_cast<size_t>(count));
  return pool;
}

}  // namespace

TextInput generate_caption(const GeneratedScene& scene,
                           const GeneratorConfig& cfg, Rng& rng) {
  const int64_t k = scene.image.num_regions();
  if (k < 1) throw ContractError("cannot caption a scene with no regions");
  const auto& vocab = cfg.vocab;
  auto enabled = [&](const char* t) {
    return std::find(cfg.caption_template_set.begin(),
                     cfg.caption_template_set.end(),
                     t) != cfg.caption_template_set.end();
  };

  std::string tmpl;
  if (k >= 3 && enabled("triple") &&
      (!enabled("pair") || rng.uniform() < cfg.triple_prob)) {
    tmpl = "triple";
  } else if (k >= 2 && enabled("pair")) {
    tmpl = "pair";
  } else if (enabled("single")) {
    tmpl = "single";
  } else if (k >= 2 && enabled("triple") && k >= 3) {
    tmpl = "triple";
  } else {
    throw ContractError("no enabled caption template fits a scene with " +
                        std::to_string(k) + " regions");
  }

  const int64_t the = vocab.id_of("the");
  const int64_t is = vocab.id_of("is");
  std::vector<int64_t> words;
  if (tmpl == "single") {
    const int64_t a = rng.uniform_int(k);
    words = {the, vocab.class_word_id(scene.classes[static_cast<size_t>(a)]),
             is, vocab.id_of("in"), the, vocab.id_of("scene")};
  } else if (tmpl == "pair") {
    const auto picks = pick_distinct(k, 2, rng);
    const auto rel = relation_between(scene.image.boxes[static_cast<size_t>(picks[0])],
                                      scene.image.boxes[static_cast<size_t>(picks[1])]);
    words = {the, vocab.class_word_id(scene.classes[static_cast<size_t>(picks[0])]),
             is, vocab.relation_id(rel),
             the, vocab.class_word_id(scene.classes[static_cast<size_t>(picks[1])])};
  } else {
    const auto picks = pick_distinct(k, 3, rng);
    const auto r1 = relation_between(scene.image.boxes[static_cast<size_t>(picks[0])],
                                     scene.image.boxes[static_cast<size_t>(picks[1])]);
    const auto r2 = relation_between(scene.image.boxes[static_cast<size_t>(picks[1])],
                                     scene.image.boxes[static_cast<size_t>(picks[2])]);
    const int64_t a = vocab.class_word_id(scene.classes[static_cast<size_t>(picks[0])]);
    const int64_t b = vocab.class_word_id(scene.classes[static_cast<size_t>(picks[1])]);
    const int64_t c = vocab.class_word_id(scene.classes[static_cast<size_t>(picks[2])]);
    words = {the, a, is, vocab.relation_id(r1), the, b,
             vocab.id_of("and"), the, b, is, vocab.relation_id(r2), the, c};
  }

  std::vector<int64_t> ids;
  ids.reserve(words.size() + 2);
  ids.push_back(tokens::kCls);
  ids.insert(ids.end(), words.begin(), words.end());
  ids.push_back(tokens::kSep);
  TextInput t = TextInput::from_ids(std::move(ids));
  t.validate(cfg.max_text_len);
  return t;
}

std::vector<PairedExample> generate_dataset(const GeneratorConfig& cfg,
                                            int64_t n, int64_t id_offset) {
  if (n < 1) throw ContractError("dataset size must be at least 1");
  if (!cfg.finalized()) throw ContractError("generator config not finalized");
  std::vector<PairedExample> out;
  out.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const int64_t id = id_offset + i;
    Rng rng = Rng::stream(cfg.seed, static_cast<uint64_t>(id));
    GeneratedScene scene = generate_scene(cfg, rng);
    PairedExample ex;
    ex.example_id = id;
    ex.caption = generate_caption(scene, cfg, rng);
    ex.image = std::move(scene.image);
    ex.region_classes = std::move(scene.classes);
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<PairedExample> seeded_subset(std::span<const PairedExample> all,
                                         real fraction, uint64_t seed) {
  if (fraction <= 0.0 || fraction > 1.0) {
    throw ContractError("subset fraction must be in (0,1]");
  }
  const int64_t n = static_cast<int64_t>(all.size());
  const int64_t keep = std::max<int64_t>(
      1, static_cast<int64_t>(std::llround(fraction * static_cast<real>(n))));
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng::stream(seed, fnv1a64("subset"));
  rng.shuffle(order);
  order.resize(static_cast<size_t>(std::min(keep, n)));
  std::sort(order.begin(), order.end());
  std::vector<PairedExample> out;
  out.reserve(order.size());
  for (int64_t idx : order) out.push_back(all[static_cast<size_t>(idx)]);
  return out;
}

namespace {

void append_real_list(std::string& line, std::span<const real> vals,
                      int64_t stride) {
  for (size_t i = 0; i < vals.size(); ++i) {
    if (i > 0) line += (stride > 0 && i % static_cast<size_t>(stride) == 0) ? ';' : ',';
    line += format_real(vals[i]);
  }
}

std::vector<real> parse_real_grid(std::string_view field, const char* what,
                                  int64_t expect_cols) {
  std::vector<real> out;
  for (auto row : split(field, ';')) {
    int64_t cols = 0;
    for (auto cell : split(row, ',')) {
      out.push_back(parse_real(cell));
      ++cols;
    }
    if (expect_cols > 0 && cols != expect_cols) {
      throw ParseError(std::string(what) + " row has " + std::to_string(cols) +
                       " values, expected " + std::to_string(expect_cols));
    }
  }
  return out;
}

}  // namespace

void write_dataset(const std::string& path, const GeneratorConfig& cfg,
                   std::span<const PairedExample> examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  char digest_hex[17];
  std::snprintf(digest_hex, sizeof(digest_hex), "%016llx",
                static_cast<unsigned long long>(cfg.digest()));
  out << "vilbert-dataset version=1 digest=" << digest_hex
      << " n=" << examples.size() << " classes=" << cfg.num_region_classes
      << " feature_dim=" << cfg.visual_feature_dim
      << " vocab_size=" << cfg.vocab.size()
      << " max_text_len=" << cfg.max_text_len
      << " rng=splitmix64+xoshiro256ss vocab=";
  for (int64_t i = 0; i < cfg.vocab.size(); ++i) {
    if (i) out << ',';
    out << cfg.vocab.words[static_cast<size_t>(i)];
  }
  out << "\n";
  std::string line;
  for (const auto& ex : examples) {
    line.clear();
    line += "id=" + std::to_string(ex.example_id);
    line += " classes=";
    for (size_t i = 0; i < ex.region_classes.size(); ++i) {
      if (i) line += ',';
      line += std::to_string(ex.region_classes[i]);
    }
    line += " boxes=";
    for (size_t i = 0; i < ex.image.boxes.size(); ++i) {
      if (i) line += ';';
      const auto& b = ex.image.boxes[i];
      line += format_real(b[0]) + "," + format_real(b[1]) + "," +
              format_real(b[2]) + "," + format_real(b[3]);
    }
    line += " features=";
    append_real_list(line, ex.image.features, ex.image.feature_dim);
    line += " det=";
    append_real_list(line, ex.image.detector_dist, ex.image.num_classes);
    line += " caption=";
    for (size_t i = 0; i < ex.caption.token_ids.size(); ++i) {
      if (i) line += ',';
      line += std::to_string(ex.caption.token_ids[i]);
    }
    out << line << "\n";
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

LoadedDataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  LoadedDataset ds;
  std::string line;
  if (!std::getline(in, line)) {
    return ds;  // an empty file is an empty dataset
  }
  int64_t expected_n = -1;
  {
    auto fields = split(line, ' ');
    if (fields.empty() || fields[0] != "vilbert-dataset") {
      throw ParseError("line 1: not a dataset file (bad magic)");
    }
    for (size_t i = 1; i < fields.size(); ++i) {
      auto kv = split(fields[i], '=');
      if (kv.size() != 2) throw ParseError("line 1: malformed header field");
      const std::string key(kv[0]);
      if (key == "version") {
        if (parse_int(kv[1]) != 1) {
          throw ParseError("line 1: unsupported dataset version " +
                           std::string(kv[1]));
        }
      } else if (key == "digest") {
        ds.config_digest = std::stoull(std::string(kv[1]), nullptr, 16);
      } else if (key == "n") expected_n = parse_int(kv[1]);
      else if (key == "classes") ds.num_classes = parse_int(kv[1]);
      else if (key == "feature_dim") ds.feature_dim = parse_int(kv[1]);
      else if (key == "vocab_size") ds.vocab_size = parse_int(kv[1]);
      else if (key == "max_text_len") ds.max_text_len = parse_int(kv[1]);
      else if (key == "rng") { /* informational */ }
      else if (key == "vocab") {
        for (auto w : split(kv[1], ',')) ds.vocab_words.emplace_back(w);
      } else throw ParseError("line 1: unknown header field '" + key + "'");
    }
  }
  if (!ds.vocab_words.empty() &&
      ds.vocab_size != static_cast<int64_t>(ds.vocab_words.size())) {
    throw ParseError(path + ": line 1: vocab list does not match vocab_size");
  }
  int64_t line_no = 1;
  int64_t last_good = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      PairedExample ex;
      ex.image.feature_dim = ds.feature_dim;
      ex.image.num_classes = ds.num_classes;
      bool saw_id = false, saw_caption = false;
      for (auto field : split(line, ' ')) {
        if (field.empty()) continue;
        const size_t eq = field.find('=');
        if (eq == std::string_view::npos) {
          throw ParseError("field without '='");
        }
        const auto key = field.substr(0, eq);
        const auto val = field.substr(eq + 1);
        if (key == "id") {
          ex.example_id = parse_int(val);
          saw_id = true;
        } else if (key == "classes") {
          for (auto c : split(val, ',')) {
            ex.region_classes.push_back(parse_int(c));
          }
        } else if (key == "boxes") {
          for (auto b : split(val, ';')) {
            auto coords = split(b, ',');
            if (coords.size() != 4) throw ParseError("box needs 4 coords");
            ex.image.boxes.push_back({parse_real(coords[0]),
                                      parse_real(coords[1]),
                                      parse_real(coords[2]),
                                      parse_real(coords[3])});
          }
        } else if (key == "features") {
          ex.image.features =
              parse_real_grid(val, "features", ds.feature_dim);
        } else if (key == "det") {
          ex.image.detector_dist = parse_real_grid(val, "det", ds.num_classes);
        } else if (key == "caption") {
          std::vector<int64_t> ids;
          for (auto t : split(val, ',')) ids.push_back(parse_int(t));
          ex.caption = TextInput::from_ids(std::move(ids));
          saw_caption = true;
        } else {
          throw ParseError("unknown record field '" + std::string(key) + "'");
        }
      }
      if (!saw_id || !saw_caption || ex.image.boxes.empty()) {
        throw ParseError("incomplete record");
      }
      ex.image.rebuild_spatial5();
      ex.image.validate();
      if (ex.region_classes.size() != ex.image.boxes.size()) {
        throw ParseError("class list does not match region count");
      }
      ds.examples.push_back(std::move(ex));
      last_good = line_no;
    } catch (const ParseError& e) {
      throw ParseError(path + ": line " + std::to_string(line_no) + ": " +
                       e.what() + " (last good line " +
                       std::to_string(last_good) + ")");
    } catch (const ContractError& e) {
      throw ParseError(path + ": line " + std::to_string(line_no) + ": " +
                       e.what() + " (last good line " +
                       std::to_string(last_good) + ")");
    }
  }
  if (expected_n >= 0 &&
      expected_n != static_cast<int64_t>(ds.examples.size())) {
    throw ParseError(path + ": header says n=" + std::to_string(expected_n) +
                     " but found " + std::to_string(ds.examples.size()) +
                     " records (last good line " + std::to_string(last_good) +
                     ")");
  }
  return ds;
}

}  // namespace vilbert
