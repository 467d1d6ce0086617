#pragma once

#include <stdexcept>
#include <string>

namespace emoe {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or layer sizes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the domain of an operation (non-positive lgamma input,
/// non-finite result, out-of-range encode, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value or unknown configuration key / name.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// File missing, truncated, or failing a format check.
class IoError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf encountered during optimization.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace emoe
