#pragma once

#include <stdexcept>
#include <string>

namespace roto {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible with the requested operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated by the caller.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf appeared in a computed value, or an iteration diverged.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Conjugate gradient broke down or failed to reach tolerance.
class SolverError : public NumericError {
 public:
  using NumericError::NumericError;
};

/// Persistent data is malformed (bad magic, truncation, checksum).
class FormatError : public Error {
 public:
  using Error::Error;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw PreconditionError(what);
}

}  // namespace roto
