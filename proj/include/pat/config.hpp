#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "pat/errors.hpp"

namespace pat {

/// Flat key=value store backing config files and the resolved-run snapshots.
/// '#' starts a comment, whitespace around keys and values is trimmed.
class KeyValues {
 public:
  static KeyValues from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    KeyValues kv;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const std::size_t hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const std::size_t eq = trimmed.find('=');
      if (eq == std::string::npos)
        throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
      kv.set(trim(trimmed.substr(0, eq)), trim(trimmed.substr(eq + 1)));
    }
    return kv;
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing config key: " + key);
    return it->second;
  }

  std::string get_or(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key) const {
    const std::string& s = get(key);
    char* end = nullptr;
    const double x = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0') throw ConfigError("config key " + key + ": bad number " + s);
    return x;
  }

  std::uint64_t get_u64(const std::string& key) const {
    const std::string& s = get(key);
    char* end = nullptr;
    const unsigned long long x = std::strtoull(s.c_str(), &end, 10);
    if (end == s.c_str() || *end != '\0')
      throw ConfigError("config key " + key + ": bad integer " + s);
    return x;
  }

  bool get_bool(const std::string& key) const {
    const std::string& s = get(key);
    if (s == "1" || s == "true" || s == "on") return true;
    if (s == "0" || s == "false" || s == "off") return false;
    throw ConfigError("config key " + key + ": bad boolean " + s);
  }

  /// Rejects any key outside the given registry.
  void restrict_to(const std::set<std::string>& known) const {
    for (const auto& [k, v] : values_)
      if (known.count(k) == 0) throw ConfigError("unknown config key: " + k);
  }

  /// Deterministic snapshot, one sorted key=value per line.
  void write(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for write: " + path);
    for (const auto& [k, v] : values_) os << k << "=" << v << "\n";
    if (!os) throw IoError("write failed: " + path);
  }

  const std::map<std::string, std::string>& items() const { return values_; }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace pat
