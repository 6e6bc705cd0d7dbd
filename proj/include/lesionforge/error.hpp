#ifndef LESIONFORGE_ERROR_HPP
#define LESIONFORGE_ERROR_HPP

#include <stdexcept>
#include <string>

namespace lesionforge {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand extents disagree with what an operation requires.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed or unreadable input file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Numerical breakdown (NaN/Inf, singular system, degenerate input).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace lesionforge

#endif  // LESIONFORGE_ERROR_HPP
