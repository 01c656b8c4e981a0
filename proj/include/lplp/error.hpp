#pragma once

#include <stdexcept>
#include <string>

namespace lplp {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid operation while building a computation graph (division by zero, log of a non-positive value).
class GraphError : public Error {
 public:
  using Error::Error;
};

/// API misuse: mismatched dimensions, foreign tape nodes, repeated backward.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Rejected configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed file content. Carries the 1-based line where parsing stopped.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Data that parses but violates a domain invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Synthetic data generation failure, e.g. an exhausted instance pool.
class GenerationError : public Error {
 public:
  using Error::Error;
};

/// Failure during optimization (non-finite gradients, nothing left to train on).
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace lplp
