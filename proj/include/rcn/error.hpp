#pragma once

#include <stdexcept>
#include <string>

namespace rcn {

// Error families map onto CLI exit codes: usage 1, data 2, numeric 3.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace rcn
