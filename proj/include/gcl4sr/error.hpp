#pragma once

#include <stdexcept>
#include <string>

namespace gcl4sr {

// All library failures surface as this type (or a subclass) so callers can
// catch one thing at the CLI boundary.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace gcl4sr
