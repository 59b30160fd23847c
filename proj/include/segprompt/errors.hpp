#pragma once

#include <stdexcept>
#include <string>

namespace segprompt {

/// Tensor shapes that do not agree for an operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid configuration or argument value (bad mode name, non-square l_s, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Violation of a protocol guarantee: data leakage, NaN loss, missing gradient,
/// unreachable calibration target.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed or missing files.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace segprompt
