#pragma once

#include <stdexcept>
#include <string>

namespace inv {

// Raised for bad inputs: malformed files, violated preconditions, invalid
// requests. The CLI maps it to exit code 1.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a game/service operation is not allowed in the current state.
class StateError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

}  // namespace inv
