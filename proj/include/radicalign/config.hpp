#pragma once

// Plain `key = value` configuration text and the resolved run configuration.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "radicalign/common.hpp"

namespace radicalign::config {

/// Ordered key -> value map. Blank lines and lines starting with '#' are
/// ignored; anything else must be `key = value`. Errors carry source:line.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text, const std::string& source = "<text>");
  static KeyValues load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  const std::map<std::string, std::string>& items() const noexcept { return values_; }

  std::string get(const std::string& key, const std::string& fallback) const;
  std::string require(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<int> get_ints(const std::string& key, const std::vector<int>& fallback) const;

  /// Sorted `key = value` lines.
  std::string to_text() const;

 private:
  std::map<std::string, std::string> values_;
  std::map<std::string, std::string> origin_;  // key -> "file:line"
};

}  // namespace radicalign::config
