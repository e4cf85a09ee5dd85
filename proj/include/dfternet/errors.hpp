#pragma once

#include <stdexcept>
#include <string>

namespace dfternet {

// Shape or length disagreement between operands.
struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid scalar argument (pool < 1, bit-width < 2, ...).
struct ParameterError : std::invalid_argument {
  explicit ParameterError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Input that makes the requested quantity undefined (all-zero weights, empty support).
struct DegenerateInputError : std::runtime_error {
  explicit DegenerateInputError(const std::string& msg) : std::runtime_error(msg) {}
};

// Value handed to a bit-exact path is not on the expected grid.
struct PrecisionError : std::runtime_error {
  explicit PrecisionError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ParseError : std::runtime_error {
  explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or incompatible packed-model bytes.
struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace dfternet
