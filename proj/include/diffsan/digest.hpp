#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace diffsan {

// Incremental SHA-256, hex-encoded result.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, size_t len);
  void update(const std::string& s) { update(s.data(), s.size()); }
  template <typename T>
  void update_vec(const std::vector<T>& v) {
    update(v.data(), v.size() * sizeof(T));
  }
  // finalizes; the object must not be updated afterwards
  std::string hex();

 private:
  void* ctx_;
};

std::string sha256_hex(const void* data, size_t len);
std::string sha256_hex(const std::string& s);
std::string sha256_file(const std::filesystem::path& p);  // IntegrityError if unreadable

}  // namespace diffsan
