// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "vilbert/model.hpp"

namespace vilbert {

enum class Relation { left_of, right_of, above, below };

std::string relation_word(Relation r);

/// True spatial relation of box a relative to box b, decided from centers:
/// the axis with the larger separation wins (y grows downward).
Relation relation_between(const std::array<real, 4>& a,
                          const std::array<real, 4>& b);

/// Word/id table: the four special tokens first, then template words,
/// relation words, one word per region class, then filler vocabulary.
struct Vocabulary {
  std::vector<std::string> words;
  std::unordered_map<std::string, int64_t> ids;
  int64_t num_classes = 0;
  int64_t first_class_word = 0;

  int64_t size() const { return static_cast<int64_t>(words.size()); }
  int64_t id_of(const std::string& w) const;
  int64_t class_word_id(int64_t cls) const;
  /// Inverse of class_word_id; -1 if the id is not a class word.
  int64_t class_of_word(int64_t id) const;
  int64_t relation_id(Relation r) const;
  const std::string& word(int64_t id) const;

  static Vocabulary build(int64_t num_classes, int64_t filler_words = 90);
};

/// Everything that determines the synthetic corpus. Datasets are a pure
/// function of (config, example id): generation draws from the splittable
/// xoshiro256**/SplitMix64 stream (seed, id).
struct GeneratorConfig {
  int64_t num_region_classes = 8;
  int64_t visual_feature_dim = 16;
  real feature_noise_sigma = 0.1;
  real detector_temperature = 1.0;
  real detector_noise_sigma = 0.5;
  real detector_logit_scale = 4.0;
  int64_t min_regions = 4;
  int64_t max_regions = 8;
  std::vector<std::string> caption_template_set = {"single", "pair", "triple"};
  real triple_prob = 0.7;
  int64_t max_text_len = 16;
  int64_t filler_words = 90;
  uint64_t seed = 1;

  // derived by finalize()
  Vocabulary vocab;
  std::vector<real> prototypes;  // num_region_classes x visual_feature_dim

  /// Builds the vocabulary and the unit-norm class prototypes. Call after
  /// editing any field above.
  void finalize();
  bool finalized() const { return !prototypes.empty(); }
  std::span<const real> prototype(int64_t cls) const;

  void validate() const;
  uint64_t digest() const;
  std::vector<std::pair<std::string, std::string>> to_kv() const;
  static GeneratorConfig from_kv(
      const std::vector<std::pair<std::string, std::string>>& kv);
};

struct GeneratedScene {
  ImageInput image;
  std::vector<int64_t> classes;  // true class per region
};

/// One aligned scene-caption pair. The caption only mentions classes present
/// in the scene.
struct PairedExample {
  int64_t example_id = 0;
  TextInput caption;
  ImageInput image;
  std::vector<int64_t> region_classes;
};

GeneratedScene generate_scene(const GeneratorConfig& cfg, Rng& rng);
TextInput generate_caption(const GeneratedScene& scene,
                           const GeneratorConfig& cfg, Rng& rng);

/// Feature vector (prototype + noise, quantized like the file format) and
/// detector row for one region of the given class.
void sample_region_channels(const GeneratorConfig& cfg, int64_t cls, Rng& rng,
                            std::span<real> feature_out,
                            std::span<real> det_out);

/// n aligned pairs with ids id_offset ... id_offset+n-1, each derived from
/// the stream (cfg.seed, id).
std::vector<PairedExample> generate_dataset(const GeneratorConfig& cfg,
                                            int64_t n, int64_t id_offset = 0);

/// Stable seeded subset: a fixed shuffle of the input is computed from
/// `seed` and the first round(fraction*n) entries are kept (in original
/// order), so smaller fractions nest inside larger ones.
std::vector<PairedExample> seeded_subset(std::span<const PairedExample> all,
                                         real fraction, uint64_t seed);

void write_dataset(const std::string& path, const GeneratorConfig& cfg,
                   std::span<const PairedExample> examples);

struct LoadedDataset {
  uint64_t config_digest = 0;
  int64_t num_classes = 0;
  int64_t feature_dim = 0;
  int64_t vocab_size = 0;
  int64_t max_text_len = 0;
  std::vector<std::string> vocab_words;  // id -> word, from the header
  std::vector<PairedExample> examples;
};

/// Inverse of write_dataset; an empty file loads as an empty dataset.
LoadedDataset load_dataset(const std::string& path);

}  // namespace vilbert
