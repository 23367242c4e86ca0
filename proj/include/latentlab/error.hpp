#pragma once

#include <stdexcept>
#include <string>

namespace latentlab {

// Error taxonomy, mapped to CLI exit codes: ConfigError -> 2, the rest -> 1.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

// Bad configuration (invalid field combination, unknown key, ...).
struct ConfigError : Error {
  using Error::Error;
};

// API misuse (backward on a non-scalar, missing time input, ...).
struct UsageError : Error {
  using Error::Error;
};

struct IndexError : Error {
  using Error::Error;
};

// NaN/Inf escaped an op, or a numerical routine failed to converge.
struct NumericalError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace latentlab
