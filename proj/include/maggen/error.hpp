#pragma once

#include <stdexcept>
#include <string>

namespace maggen {

// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// API misuse: bad arguments, detached tensors, backward over a truncated tape.
struct UsageError : Error {
  using Error::Error;
};

// Tensor op invoked with non-conforming shapes.
struct ShapeError : UsageError {
  using UsageError::UsageError;
};

// A forward op produced a non-finite value, or a numeric-domain rule was hit.
struct NumericError : Error {
  using Error::Error;
};

// Invalid configuration value.
struct ConfigError : Error {
  using Error::Error;
};

// File I/O failure (open/read/write).
struct IoError : Error {
  using Error::Error;
};

// Malformed file content.
struct FormatError : Error {
  using Error::Error;
};

struct BadMagicError : FormatError {
  using FormatError::FormatError;
};

struct TruncatedError : FormatError {
  using FormatError::FormatError;
};

struct ChecksumError : FormatError {
  using FormatError::FormatError;
};

}  // namespace maggen
