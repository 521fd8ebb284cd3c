#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace festa {

// Root of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Data that violates a domain invariant, e.g. a non-finite coordinate.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Tape/parameter or config/parameter disagreement.
class StateError : public Error {
 public:
  using Error::Error;
};

class GenerationError : public Error {
 public:
  using Error::Error;
};

class TrainingDivergence : public Error {
 public:
  using Error::Error;
};

// Malformed file. `line` is 1-based for text formats and 0 for binary ones.
class FormatError : public Error {
 public:
  FormatError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  explicit FormatError(const std::string& what) : Error(what), line_(0) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace festa
