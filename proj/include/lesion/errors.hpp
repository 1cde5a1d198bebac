#pragma once

#include <stdexcept>
#include <string>

namespace lesion {

/// Input violates a documented precondition (shape, range, simplex, ...).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inconsistent or missing configuration / models.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Index or box outside the grid.
class BoundsError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Filesystem failure; message carries the offending path.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File exists but its bytes do not follow the expected layout.
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

/// Payload shorter or longer than the header promises.
class LengthError : public IoError {
 public:
  using IoError::IoError;
};

/// Serialized model written by an incompatible version.
class IncompatibleVersionError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

}  // namespace lesion
