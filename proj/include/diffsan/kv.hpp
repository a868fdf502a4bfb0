#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace diffsan {

// Flat "dotted.key: value" text document. One entry per line, '#' starts a
// comment, blank lines ignored. Nesting is expressed with dots in the key so
// documents stay diff-friendly and trivially greppable.
class KvDoc {
 public:
  KvDoc() = default;

  static KvDoc parse(const std::string& text);            // ConfigError on bad lines
  static KvDoc read_file(const std::filesystem::path&);   // ConfigError if unreadable

  void set(const std::string& key, const std::string& value);
  void set_i64(const std::string& key, int64_t v);
  void set_u64(const std::string& key, uint64_t v);
  void set_f64(const std::string& key, double v);
  void set_f32(const std::string& key, float v);
  void set_bool(const std::string& key, bool v);

  bool has(const std::string& key) const;
  std::optional<std::string> get(const std::string& key) const;

  // typed getters: ConfigError when missing or unparseable
  std::string get_str(const std::string& key) const;
  std::string get_str(const std::string& key, const std::string& fallback) const;
  int64_t get_i64(const std::string& key) const;
  int64_t get_i64(const std::string& key, int64_t fallback) const;
  uint64_t get_u64(const std::string& key) const;
  uint64_t get_u64(const std::string& key, uint64_t fallback) const;
  double get_f64(const std::string& key) const;
  double get_f64(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key) const;
  bool get_bool(const std::string& key, bool fallback) const;

  std::vector<std::string> keys() const;                       // insertion order
  std::vector<std::string> keys_with_prefix(const std::string& prefix) const;
  void erase_prefix(const std::string& prefix);

  std::string to_string() const;             // insertion order, round-trips through parse
  std::string canonical_string() const;      // sorted by key, for digesting
  void write_file(const std::filesystem::path&) const;

  bool operator==(const KvDoc& other) const { return map_ == other.map_; }

 private:
  std::map<std::string, std::string> map_;
  std::vector<std::string> order_;
};

std::vector<std::string> split(const std::string& s, char sep);
std::string trim(const std::string& s);
std::string format_double(double v);  // round-trip precision
std::string format_float(float v);    // shortest text that parses back to the same float

}  // namespace diffsan
