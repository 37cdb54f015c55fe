#pragma once

#include <stdexcept>
#include <string>

namespace brainmt {

// Error taxonomy, mapped to CLI exit codes: config/dim/io -> 2, numeric -> 3.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or extent mismatch between tensors/volumes.
struct DimError : Error {
  using Error::Error;
};

// Bad configuration: unknown enum value, missing key, invalid preset.
struct ConfigError : Error {
  using Error::Error;
};

// NaN/Inf produced by an operation, or a diverged training loss.
struct NumericError : Error {
  using Error::Error;
};

// File-level problems: bad magic, truncated payload, unreadable path.
struct IoError : Error {
  using Error::Error;
};

}  // namespace brainmt
