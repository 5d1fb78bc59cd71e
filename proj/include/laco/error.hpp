#pragma once

#include <stdexcept>
#include <string>

namespace laco {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A tensor required by the declared layer count is missing, or an unsupported one is present.
class StructuralError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Unparsable or unsupported on-disk data (safetensors header, config JSON, corpus lines).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Layer index, merge window or token id outside the valid range.
class RangeError : public Error {
 public:
  using Error::Error;
};

/// Inputs for which a metric is undefined (zero-norm vectors, non-probability vectors).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// An internal invariant was observed broken at runtime.
class InvariantError : public Error {
 public:
  using Error::Error;
};

}  // namespace laco
