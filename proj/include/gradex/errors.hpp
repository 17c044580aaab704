#pragma once

#include <stdexcept>
#include <string>

namespace gradex {

// Exit codes used by the CLI; library code throws, the CLI maps.
enum ExitCode : int {
  kOk = 0,
  kConfigError = 2,
  kNumericError = 3,
  kStaleArtifact = 4,
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct ShapeError : std::invalid_argument {
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

struct ProtocolError : std::logic_error {
  explicit ProtocolError(const std::string& what) : std::logic_error(what) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

struct StaleArtifactError : std::runtime_error {
  explicit StaleArtifactError(const std::string& what)
      : std::runtime_error(what) {}
};

}  // namespace gradex
