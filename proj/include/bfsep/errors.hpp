#pragma once

#include <stdexcept>
#include <string>

namespace bfsep {

// Base class so the CLI can map failures onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad input: wrong shapes, out-of-range configuration, unreadable files.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// NaN/Inf, singular systems that could not be rescued, solver failures.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace bfsep
