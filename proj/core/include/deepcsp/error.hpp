#pragma once

#include <stdexcept>
#include <string>

namespace deepcsp {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Input contains NaN or infinity.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// A precondition on argument values was violated (bad band, bad fraction, ...).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Matrix that should be positive definite is not (even after regularization).
class NotPositiveDefinite : public Error {
 public:
  using Error::Error;
};

}  // namespace deepcsp
