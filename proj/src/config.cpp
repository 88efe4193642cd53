#include "radicalign/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace radicalign::config {

namespace {

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  return std::string(s.substr(b, e - b));
}

}  // namespace

KeyValues KeyValues::parse(const std::string& text, const std::string& source) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    const std::string where = source + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw Error(ErrorKind::Config, where + ": expected key = value");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    if (key.empty()) throw Error(ErrorKind::Config, where + ": empty key");
    kv.values_[key] = trim(std::string_view(t).substr(eq + 1));
    kv.origin_[key] = where;
  }
  return kv;
}

KeyValues KeyValues::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorKind::Io, "cannot open config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str(), path.string());
}

std::string KeyValues::get(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

std::string KeyValues::require(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw Error(ErrorKind::Config, "missing required key '" + key + "'");
  return it->second;
}

namespace {

template <typename N>
N parse_number(const std::string& key, const std::string& value, const std::map<std::string, std::string>& origin) {
  N out{};
  auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || p != value.data() + value.size()) {
    auto it = origin.find(key);
    const std::string where = it == origin.end() ? std::string("<override>") : it->second;
    throw Error(ErrorKind::Config, where + ": bad value '" + value + "' for " + key);
  }
  return out;
}

}  // namespace

double KeyValues::get_double(const std::string& key, double fallback) const {
  return has(key) ? parse_number<double>(key, values_.at(key), origin_) : fallback;
}

long long KeyValues::get_int(const std::string& key, long long fallback) const {
  return has(key) ? parse_number<long long>(key, values_.at(key), origin_) : fallback;
}

std::uint64_t KeyValues::get_u64(const std::string& key, std::uint64_t fallback) const {
  return has(key) ? parse_number<std::uint64_t>(key, values_.at(key), origin_) : fallback;
}

bool KeyValues::get_bool(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  const std::string& v = values_.at(key);
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw Error(ErrorKind::Config, "bad boolean '" + v + "' for " + key);
}

std::vector<int> KeyValues::get_ints(const std::string& key, const std::vector<int>& fallback) const {
  if (!has(key)) return fallback;
  std::vector<int> out;
  std::string item;
  std::istringstream in(values_.at(key));
  while (std::getline(in, item, ',')) {
    const std::string t = trim(item);
    if (!t.empty()) out.push_back(parse_number<int>(key, t, origin_));
  }
  return out;
}

std::string KeyValues::to_text() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

}  // namespace radicalign::config
