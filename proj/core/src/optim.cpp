// SPDX-License-Identifier: Apache-2.0
#include "vilbert/optim.hpp"

#include <cmath>

namespace vilbert {

void LrSchedule::validate() const {
  if (peak_lr <= 0) throw ContractError("peak_lr must be positive");
  if (!(0 < warmup_steps && warmup_steps < total_steps)) {
    throw ContractError("schedule needs 0 < warmup_steps < total_steps");
  }
}

real lr_at(int64_t step, const LrSchedule& sched) {
  sched.validate();
  if (step < 0 || step > sched.total_steps) {
    throw ContractError("schedule step " + std::to_string(step) +
                        " outside [0," + std::to_string(sched.total_steps) +
                        "]");
  }
  if (step <= sched.warmup_steps) {
    return sched.peak_lr * static_cast<real>(step) /
           static_cast<real>(sched.warmup_steps);
  }
  return sched.peak_lr *
         static_cast<real>(sched.total_steps - step) /
         static_cast<real>(sched.total_steps - sched.warmup_steps);
}

Adam::Adam(const ParamMap& params, AdamConfig cfg) : cfg_(cfg) {
  m_.reserve(params.items().size());
  v_.reserve(params.items().size());
  for (const auto& [name, t] : params.items()) {
    m_.emplace_back(static_cast<size_t>(t.numel()), 0.0);
    v_.emplace_back(static_cast<size_t>(t.numel()), 0.0);
  }
}

void Adam::step(ParamMap& params, real lr) {
  if (m_.size() != params.items().size()) {
    throw ContractError("optimizer state does not match parameter map");
  }
  ++t_;
  const real bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<real>(t_));
  const real bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<real>(t_));
  for (size_t p = 0; p < m_.size(); ++p) {
    const auto& [name, tensor] = params.items()[p];
    const auto& node = tensor.node();
    auto& mp = m_[p];
    auto& vp = v_[p];
    const bool has_grad = !node->grad.empty();
    for (size_t i = 0; i < mp.size(); ++i) {
      const real g = has_grad ? node->grad[i] : 0.0;
      if (!std::isfinite(g)) {
        throw NumericError("non-finite gradient in parameter '" + name + "'");
      }
      mp[i] = cfg_.beta1 * mp[i] + (1.0 - cfg_.beta1) * g;
      vp[i] = cfg_.beta2 * vp[i] + (1.0 - cfg_.beta2) * g * g;
      const real mhat = mp[i] / bc1;
      const real vhat = vp[i] / bc2;
      node->value[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

void Adam::restore(int64_t t, std::vector<std::vector<real>> m,
                   std::vector<std::vector<real>> v) {
  if (m.size() != m_.size() || v.size() != v_.size()) {
    throw ContractError("restored optimizer state has wrong parameter count");
  }
  for (size_t i = 0; i < m.size(); ++i) {
    if (m[i].size() != m_[i].size() || v[i].size() != v_[i].size()) {
      throw ContractError("restored optimizer moment shapes do not match");
    }
  }
  t_ = t;
  m_ = std::move(m);
  v_ = std::move(v);
}

real global_grad_norm(const ParamMap& params) {
  real sum = 0;
  for (const auto& [name, t] : params.items()) {
    if (!t.has_grad()) continue;
    for (real g : t.grad()) sum += g * g;
  }
  return std::sqrt(sum);
}

void clip_grad_norm(ParamMap& params, real max_norm) {
  if (max_norm <= 0) return;
  const real norm = global_grad_norm(params);
  if (norm <= max_norm) return;
  const real factor = max_norm / norm;
  for (auto& [name, t] : params.items()) {
    if (!t.has_grad()) continue;
    for (auto& g : t.node()->grad) g *= factor;
  }
}

}  // namespace vilbert
