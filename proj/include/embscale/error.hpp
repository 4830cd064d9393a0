#pragma once

#include <stdexcept>
#include <string>

namespace embscale {

// Base for every error the library raises. The CLI maps these to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input that violates a documented invariant (bad architecture, negative tokens, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Argument outside the mathematical domain of a formula.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Unparseable file contents. Carries the byte offset of the failure.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t byte_offset)
      : Error(what + " (at byte " + std::to_string(byte_offset) + ")"), offset_(byte_offset) {}

  std::size_t byte_offset() const { return offset_; }

 private:
  std::size_t offset_;
};

class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

class FitFailure : public Error {
 public:
  using Error::Error;
};

// Bad planner configuration (empty registry, missing table, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace embscale
