#pragma once

#include <filesystem>
#include <random>
#include <string>

namespace diffsan::test {

// Self-deleting scratch directory under the system temp root.
struct TempDir {
  std::filesystem::path path;

  TempDir() {
    std::random_device rd;
    std::uniform_int_distribution<uint64_t> dist;
    path = std::filesystem::temp_directory_path() /
           ("diffsan_test_" + std::to_string(dist(rd)));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

}  // namespace diffsan::test
