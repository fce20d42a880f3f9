#pragma once

#include <stdexcept>
#include <string>

namespace stagescope {

// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad user input: malformed config, out-of-range index, invalid schedule.
// The CLI maps this to exit code 2.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Incompatible tensor or matrix dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Malformed file contents (weights, vocab, token streams).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Accepted by a type but not executable (parallel wiring, rotary positions).
class UnsupportedError : public Error {
 public:
  using Error::Error;
};

}  // namespace stagescope
