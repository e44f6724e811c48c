// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace vilbert {

/// Scalar type used throughout the tensor engine and the training runtime.
/// 64-bit keeps finite-difference gradient checks tight; the models here are
/// small enough that it is also fast enough for training.
using real = double;

// Error taxonomy. The CLI maps these onto process exit codes:
// ContractError and subclasses -> 2, NumericError -> 3, usage errors -> 1.
class ContractError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

class IndexError : public ContractError {
 public:
  using ContractError::ContractError;
};

class ParseError : public ContractError {
 public:
  using ContractError::ContractError;
};

class IoError : public ContractError {
 public:
  using ContractError::ContractError;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// FNV-1a, 64-bit. Used for config digests and checkpoint integrity checks.
class Fnv1a64 {
 public:
  void update(const void* data, size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
      state_ ^= p[i];
      state_ *= 0x100000001b3ull;
    }
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  uint64_t digest() const { return state_; }

 private:
  uint64_t state_ = 0xcbf29ce484222325ull;
};

inline uint64_t fnv1a64(std::string_view s) {
  Fnv1a64 h;
  h.update(s);
  return h.digest();
}

/// Shortest round-trip decimal form of a double (std::to_chars), so the same
/// value always serializes to the same bytes regardless of locale.
inline std::string format_real(real v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline real parse_real(std::string_view s) {
  real v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw ParseError("cannot parse real number: '" + std::string(s) + "'");
  }
  return v;
}

inline int64_t parse_int(std::string_view s) {
  int64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw ParseError("cannot parse integer: '" + std::string(s) + "'");
  }
  return v;
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  size_t start = 0;
  while (start <= s.size()) {
    size_t pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      break;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

}  // namespace vilbert
