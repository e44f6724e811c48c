// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "vilbert/model.hpp"

namespace vilbert {

/// Linear warmup from 0 to peak_lr over warmup_steps, then linear decay back
/// to 0 at total_steps.
struct LrSchedule {
  real peak_lr = 1e-4;
  int64_t warmup_steps = 1;
  int64_t total_steps = 2;

  void validate() const;
};

real lr_at(int64_t step, const LrSchedule& sched);

struct AdamConfig {
  real beta1 = 0.9;
  real beta2 = 0.999;
  real eps = 1e-8;
};

/// Bias-corrected Adam over a ParamMap. Moment buffers follow the map's
/// registration order; params with no accumulated gradient this step are
/// treated as having a zero gradient.
class Adam {
 public:
  Adam(const ParamMap& params, AdamConfig cfg = {});

  /// Applies one update from the gradients currently stored on the params.
  /// Throws NumericError naming the parameter on a non-finite gradient.
  void step(ParamMap& params, real lr);

  int64_t step_count() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

  // checkpoint plumbing
  const std::vector<std::vector<real>>& m() const { return m_; }
  const std::vector<std::vector<real>>& v() const { return v_; }
  void restore(int64_t t, std::vector<std::vector<real>> m,
               std::vector<std::vector<real>> v);

 private:
  AdamConfig cfg_;
  int64_t t_ = 0;
  std::vector<std::vector<real>> m_, v_;
};

real global_grad_norm(const ParamMap& params);

/// Scales all gradients so the global norm is at most max_norm.
/// No-op when max_norm <= 0.
void clip_grad_norm(ParamMap& params, real max_norm);

}  // namespace vilbert
