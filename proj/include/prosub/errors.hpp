#pragma once

#include <stdexcept>
#include <string>

namespace prosub {

// Error categories used across the library. All inherit from std::runtime_error
// so callers may catch broadly or by kind.

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed on-disk bytes (checkpoints, CIFAR batches, pool files).
struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// A pipeline stage was requested whose prerequisite artifact is missing.
struct DependencyError : std::runtime_error {
  explicit DependencyError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace prosub
