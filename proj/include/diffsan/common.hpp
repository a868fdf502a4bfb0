#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace diffsan {

// Raised for malformed or out-of-range configuration. CLI maps this to exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised when persisted artifacts are inconsistent: digest mismatches, truncated
// files, manifests that disagree with their payload. CLI maps this to exit code 4.
struct IntegrityError : std::runtime_error {
  explicit IntegrityError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised when a pipeline stage cannot run (missing upstream artifacts, failed
// invariants at runtime). CLI maps this to exit code 3.
struct StageError : std::runtime_error {
  explicit StageError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace diffsan
