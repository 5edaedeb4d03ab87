#pragma once

#include <stdexcept>
#include <string>

namespace recat {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad configuration value (non-positive sizes, heads not dividing d, ...).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config error: " + what) {}
};

/// Bad user input: empty sentence, unknown token id, malformed file.
class InputError : public Error {
 public:
  explicit InputError(const std::string& what) : Error("input error: " + what) {}
};

/// Inconsistent chart, schedule or tree structure.
class StructuralError : public Error {
 public:
  explicit StructuralError(const std::string& what) : Error("structural error: " + what) {}
};

/// Non-finite values or failed numeric validation.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error("numeric error: " + what) {}
};

class CheckpointError : public Error {
 public:
  explicit CheckpointError(const std::string& what) : Error("checkpoint error: " + what) {}
};

}  // namespace recat
