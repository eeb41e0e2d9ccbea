#pragma once

#include <stdexcept>
#include <string>

namespace xrds {

/// Bad user input, violated data invariants, or inconsistent configuration.
/// The CLI maps these to exit status 2.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checkpoint or dataset built for a different configuration than requested.
class ConfigMismatchError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// File-system failures and unreadable or corrupted files.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN or Inf where only finite values are allowed.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace xrds
