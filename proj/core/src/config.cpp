// SPDX-License-Identifier: Apache-2.0
#include "vilbert/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

namespace vilbert {

namespace {

std::string trim(std::string_view s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

}  // namespace

KvConfig KvConfig::parse_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_text(buf.str(), path);
}

KvConfig KvConfig::parse_text(const std::string& text,
                              const std::string& origin) {
  KvConfig cfg;
  int64_t line_no = 0;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string stripped = trim(line);
    if (stripped.empty()) continue;
    const size_t eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw ParseError(origin + ": line " + std::to_string(line_no) +
                       ": expected 'key = value'");
    }
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));
    if (key.empty()) {
      throw ParseError(origin + ": line " + std::to_string(line_no) +
                       ": empty key");
    }
    cfg.set(key, value);
  }
  return cfg;
}

void KvConfig::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : entries_) {
    if (k == key) {
      v = value;
      return;
    }
  }
  entries_.emplace_back(key, value);
}

bool KvConfig::has(const std::string& key) const {
  for (const auto& [k, v] : entries_) {
    if (k == key) return true;
  }
  return false;
}

std::string KvConfig::get(const std::string& key) const {
  for (const auto& [k, v] : entries_) {
    if (k == key) return v;
  }
  throw ContractError("missing config key '" + key + "'");
}

std::string KvConfig::get_or(const std::string& key,
                             const std::string& fallback) const {
  return has(key) ? get(key) : fallback;
}

int64_t KvConfig::get_int_or(const std::string& key, int64_t fallback) const {
  return has(key) ? parse_int(get(key)) : fallback;
}

real KvConfig::get_real_or(const std::string& key, real fallback) const {
  return has(key) ? parse_real(get(key)) : fallback;
}

void KvConfig::restrict_keys(std::span<const std::string> allowed) const {
  for (const auto& [k, v] : entries_) {
    if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) {
      std::string known;
      for (const auto& a : allowed) {
        if (!known.empty()) known += ", ";
        known += a;
      }
      throw ContractError("unknown config key '" + k + "' (known keys: " +
                          known + ")");
    }
  }
}

std::string KvConfig::serialize() const {
  auto sorted = entries_;
  std::sort(sorted.begin(), sorted.end());
  std::string out;
  for (const auto& [k, v] : sorted) {
    out += k;
    out += " = ";
    out += v;
    out += "\n";
  }
  return out;
}

void KvConfig::write_file(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << serialize();
  if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace vilbert
