// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>
#include <vector>

#include "vilbert/common.hpp"

namespace vilbert {

/// Plain-text `key = value` configuration: one pair per line, `#` comments,
/// later assignments win. Unknown keys are rejected against an allow-list so
/// typos fail loudly. The serialized form (sorted keys) is what run
/// directories echo as `effective-config`.
class KvConfig {
 public:
  static KvConfig parse_file(const std::string& path);
  static KvConfig parse_text(const std::string& text,
                             const std::string& origin = "<text>");

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;
  std::string get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;
  int64_t get_int_or(const std::string& key, int64_t fallback) const;
  real get_real_or(const std::string& key, real fallback) const;

  /// Throws ContractError on any key outside `allowed`.
  void restrict_keys(std::span<const std::string> allowed) const;

  /// Sorted `key = value` lines.
  std::string serialize() const;
  void write_file(const std::string& path) const;

  const std::vector<std::pair<std::string, std::string>>& entries() const {
    return entries_;
  }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

}  // namespace vilbert
