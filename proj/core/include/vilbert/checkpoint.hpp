// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "vilbert/metrics.hpp"
#include "vilbert/model.hpp"
#include "vilbert/optim.hpp"

namespace vilbert {

/// Full training snapshot: config, every named parameter, optimizer moments,
/// schedule position, rng state and the metric history. The container is
/// canonical (ordered fields, exact binary reals, header checksum), so
/// save -> load -> save reproduces the file byte for byte.
struct Checkpoint {
  uint64_t format_version = 1;
  std::vector<std::pair<std::string, std::string>> config_kv;
  std::vector<std::pair<std::string, Tensor>> tensors;

  bool has_optimizer = false;
  int64_t adam_step = 0;
  AdamConfig adam_cfg;
  std::vector<std::vector<real>> adam_m, adam_v;

  LrSchedule schedule;
  int64_t next_epoch = 0;
  int64_t total_epochs = 0;
  uint64_t run_seed = 0;
  std::array<uint64_t, 4> rng_state{};

  std::vector<MetricRow> history;

  /// Copies current values out of a ParamMap (detached).
  void capture_params(const ParamMap& params);
  /// Writes stored values into a matching ParamMap; names and shapes must
  /// match exactly.
  void restore_params(ParamMap& params) const;

  std::string config_value(const std::string& key) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
/// Verifies the integrity checksum and the format version.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace vilbert
