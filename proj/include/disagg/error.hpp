#pragma once

#include <stdexcept>
#include <string>

namespace disagg {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input document (grid, region file, config). Carries the line when known.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : Error(line > 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Inputs violate a documented precondition or invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or failed convergence during numerical work.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace disagg
