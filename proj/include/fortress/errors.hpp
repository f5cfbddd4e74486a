#pragma once

#include <stdexcept>
#include <string>

namespace fortress {

/// Shape mismatch, invalid hyperparameter, or any other caller-side misuse.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

/// A tensor produced NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed or truncated file (checkpoint, PPM/PGM, manifest).
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

/// Label or mask content outside the declared class range.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

/// Caller broke an operation's precondition (e.g. TiKAN applied with the gate closed).
class ContractError : public std::logic_error {
 public:
  explicit ContractError(const std::string& what) : std::logic_error(what) {}
};

}  // namespace fortress
