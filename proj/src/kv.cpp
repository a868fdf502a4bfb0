#include "diffsan/kv.hpp"

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "diffsan/common.hpp"

namespace diffsan {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

KvDoc KvDoc::parse(const std::string& text) {
  KvDoc doc;
  std::istringstream in(text);
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t colon = t.find(':');
    if (colon == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key: value', got '" + t + "'");
    std::string key = trim(t.substr(0, colon));
    std::string value = trim(t.substr(colon + 1));
    if (key.empty())
      throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    doc.set(key, value);
  }
  return doc;
}

KvDoc KvDoc::read_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

void KvDoc::set(const std::string& key, const std::string& value) {
  if (!map_.count(key)) order_.push_back(key);
  map_[key] = value;
}

void KvDoc::set_i64(const std::string& key, int64_t v) { set(key, std::to_string(v)); }
void KvDoc::set_u64(const std::string& key, uint64_t v) { set(key, std::to_string(v)); }

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string format_float(float v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void KvDoc::set_f64(const std::string& key, double v) { set(key, format_double(v)); }

void KvDoc::set_f32(const std::string& key, float v) { set(key, format_float(v)); }

void KvDoc::set_bool(const std::string& key, bool v) { set(key, v ? "true" : "false"); }

bool KvDoc::has(const std::string& key) const { return map_.count(key) != 0; }

std::optional<std::string> KvDoc::get(const std::string& key) const {
  auto it = map_.find(key);
  if (it == map_.end()) return std::nullopt;
  return it->second;
}

std::string KvDoc::get_str(const std::string& key) const {
  auto v = get(key);
  if (!v) throw ConfigError("missing key: " + key);
  return *v;
}

std::string KvDoc::get_str(const std::string& key, const std::string& fallback) const {
  auto v = get(key);
  return v ? *v : fallback;
}

int64_t KvDoc::get_i64(const std::string& key) const {
  std::string s = get_str(key);
  errno = 0;
  char* end = nullptr;
  long long v = std::strtoll(s.c_str(), &end, 10);
  if (errno != 0 || end == s.c_str() || *end != '\0')
    throw ConfigError("key " + key + ": not an integer: '" + s + "'");
  return v;
}

int64_t KvDoc::get_i64(const std::string& key, int64_t fallback) const {
  return has(key) ? get_i64(key) : fallback;
}

uint64_t KvDoc::get_u64(const std::string& key) const {
  int64_t v = get_i64(key);
  if (v < 0) throw ConfigError("key " + key + ": negative value");
  return static_cast<uint64_t>(v);
}

uint64_t KvDoc::get_u64(const std::string& key, uint64_t fallback) const {
  return has(key) ? get_u64(key) : fallback;
}

double KvDoc::get_f64(const std::string& key) const {
  std::string s = get_str(key);
  errno = 0;
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  if (errno != 0 || end == s.c_str() || *end != '\0')
    throw ConfigError("key " + key + ": not a number: '" + s + "'");
  return v;
}

double KvDoc::get_f64(const std::string& key, double fallback) const {
  return has(key) ? get_f64(key) : fallback;
}

bool KvDoc::get_bool(const std::string& key) const {
  std::string s = get_str(key);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("key " + key + ": not a boolean: '" + s + "'");
}

bool KvDoc::get_bool(const std::string& key, bool fallback) const {
  return has(key) ? get_bool(key) : fallback;
}

std::vector<std::string> KvDoc::keys() const { return order_; }

std::vector<std::string> KvDoc::keys_with_prefix(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& k : order_)
    if (k.rfind(prefix, 0) == 0) out.push_back(k);
  return out;
}

void KvDoc::erase_prefix(const std::string& prefix) {
  order_.erase(std::remove_if(order_.begin(), order_.end(),
                              [&](const std::string& k) { return k.rfind(prefix, 0) == 0; }),
               order_.end());
  for (auto it = map_.begin(); it != map_.end();) {
    if (it->first.rfind(prefix, 0) == 0)
      it = map_.erase(it);
    else
      ++it;
  }
}

std::string KvDoc::to_string() const {
  std::ostringstream ss;
  for (const auto& k : order_) ss << k << ": " << map_.at(k) << "\n";
  return ss.str();
}

std::string KvDoc::canonical_string() const {
  std::ostringstream ss;
  for (const auto& [k, v] : map_) ss << k << ": " << v << "\n";
  return ss.str();
}

void KvDoc::write_file(const std::filesystem::path& p) const {
  std::ofstream out(p);
  if (!out) throw StageError("cannot write " + p.string());
  out << to_string();
  if (!out) throw StageError("short write: " + p.string());
}

}  // namespace diffsan
