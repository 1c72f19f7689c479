#pragma once

#include <stdexcept>
#include <string>

namespace cradle {

/// Bad configuration: unknown keys, invalid values, missing sections.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Bad input data: parse failures, shape mismatches, invalid counts.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Numerical failure: non-finite losses or gradients, domain violations.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace cradle
