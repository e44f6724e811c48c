// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "vilbert/common.hpp"

namespace vilbert {

/// Deterministic, portable PRNG: xoshiro256** seeded through SplitMix64.
/// Streams are split by (seed, stream_id) so datasets, masking plans and
/// initializations reproduce bit-identically on any platform. The standard
/// library distributions are implementation-defined, so uniform/normal
/// sampling is done here with fixed algorithms.
class Rng {
 public:
  explicit Rng(uint64_t seed) { seed_state(seed); }

  /// Independent substream. Stream ids may themselves be composed, e.g.
  /// stream(seed, id).stream(epoch).
  static Rng stream(uint64_t seed, uint64_t stream_id) {
    return Rng(splitmix_mix(seed + 0x9e3779b97f4a7c15ull * (stream_id + 1)));
  }
  Rng stream(uint64_t stream_id) const {
    return Rng::stream(splitmix_mix(state_[0] ^ state_[2]), stream_id);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, n). Lemire's multiply-with-rejection.
  int64_t uniform_int(int64_t n) {
    if (n <= 0) throw ContractError("uniform_int requires n > 0");
    const uint64_t un = static_cast<uint64_t>(n);
    uint64_t x = next_u64();
    __uint128_t m = static_cast<__uint128_t>(x) * un;
    uint64_t lo = static_cast<uint64_t>(m);
    if (lo < un) {
      const uint64_t threshold = (-un) % un;
      while (lo < threshold) {
        x = next_u64();
        m = static_cast<__uint128_t>(x) * un;
        lo = static_cast<uint64_t>(m);
      }
    }
    return static_cast<int64_t>(m >> 64);
  }

  /// Standard normal via Marsaglia's polar method (spare discarded, so the
  /// generator state is a pure function of the number of draws).
  double normal() {
    for (;;) {
      double u = 2.0 * uniform() - 1.0;
      double v = 2.0 * uniform() - 1.0;
      double s = u * u + v * v;
      if (s > 0.0 && s < 1.0) {
        return u * std::sqrt(-2.0 * std::log(s) / s);
      }
    }
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      std::swap(v[i], v[static_cast<size_t>(uniform_int(i + 1))]);
    }
  }

  std::array<uint64_t, 4> state() const { return state_; }
  void set_state(const std::array<uint64_t, 4>& s) { state_ = s; }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  static uint64_t splitmix_mix(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  void seed_state(uint64_t seed) {
    uint64_t z = seed;
    for (auto& w : state_) {
      z += 0x9e3779b97f4a7c15ull;
      uint64_t t = z;
      t = (t ^ (t >> 30)) * 0xbf58476d1ce4e5b9ull;
      t = (t ^ (t >> 27)) * 0x94d049bb133111ebull;
      w = t ^ (t >> 31);
    }
    // xoshiro must not start from the all-zero state
    if (state_[0] == 0 && state_[1] == 0 && state_[2] == 0 && state_[3] == 0) {
      state_[0] = 1;
    }
  }

  std::array<uint64_t, 4> state_{};
};

}  // namespace vilbert
