// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "vilbert/tensor.hpp"

namespace vilbert {

struct GradCheckReport {
  std::string name;
  real max_err = 0;
  bool pass = false;
};

/// Central finite differences (step h, 64-bit) against reverse-mode
/// gradients. `loss_fn` must rebuild its graph from the same leaf tensors on
/// every call. The error metric is |ad - fd| / max(0.01, |ad|, |fd|).
real gradcheck_max_err(const std::function<Tensor()>& loss_fn,
                       std::span<Tensor> leaves, real step = 1e-5);

/// Every differentiable primitive, >= 5 random shapes each.
std::vector<GradCheckReport> gradcheck_ops(uint64_t seed, real tol = 1e-4);
/// Attention, transformer and co-attention blocks end to end.
std::vector<GradCheckReport> gradcheck_blocks(uint64_t seed, real tol = 1e-4);
/// Full pretraining loss on a tiny model; spot-checks `probes` randomly
/// chosen parameter entries.
std::vector<GradCheckReport> gradcheck_model(uint64_t seed, real tol = 1e-3,
                                             int64_t probes = 24);

}  // namespace vilbert
