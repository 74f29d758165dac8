#pragma once

#include <stdexcept>
#include <string>

namespace animediff {

/// Base of every error thrown by the library. Callers that only want to
/// report failures can catch this one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A numeric argument is outside its documented domain.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Tensor or image dimensions are empty or do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Caller supplied unusable input data (empty lists, unreadable files).
class InputError : public Error {
 public:
  using Error::Error;
};

/// A computation produced or would produce a non-finite result.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// A configuration combination cannot be honoured.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Thin-plate-spline system is singular (collinear or duplicated points).
class InvalidWarpError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

/// Serialized data could not be parsed.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Stored content hash does not match the recomputed one.
class HashError : public FormatError {
 public:
  using FormatError::FormatError;
};

class UnsupportedVersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace animediff
