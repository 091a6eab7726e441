#pragma once

#include <stdexcept>
#include <string>

namespace saerase {

// Error categories map one-to-one onto CLI exit codes (see cli.hpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad configuration: invalid option values, unknown keys, missing paths.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input data (dimension mismatch, truncated files...).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Numerical failure during optimization (NaN/Inf loss).
class NumericalError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline void require_dims(bool ok, const std::string& what) {
  if (!ok) throw DataError("dimension mismatch: " + what);
}

}  // namespace detail
}  // namespace saerase
