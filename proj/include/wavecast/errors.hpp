#pragma once

#include <stdexcept>
#include <string>

namespace wavecast {

/// Base for all library errors. `exit_code()` maps onto the CLI contract:
/// 1 usage, 2 data/format, 3 numeric.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

/// Tensor shapes that do not fit together.
class DimensionError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

/// An API or CLI used out of order or with invalid arguments.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values (CFL violations, unknown keys, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated files.
class FormatError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

/// Files cut short or otherwise inconsistent with their own header.
class IntegrityError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

}  // namespace wavecast
