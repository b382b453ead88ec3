#pragma once

#include <stdexcept>
#include <string>

namespace tempal {

// Shapes of operands are incompatible with the operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A documented precondition or usage contract was violated.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Input is mathematically degenerate (e.g. zero-norm vector).
class DegenerateInputError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Requested work exceeds a fixed capacity (store too small, state space too large).
class CapacityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or unsupported on-disk data.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UnsupportedVersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tempal
