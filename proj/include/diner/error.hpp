#pragma once

#include <stdexcept>
#include <string>

namespace diner {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input file; message names the offending line when one exists.
class ParseError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced anywhere in a forward or backward pass.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// A corpus transformation whose preconditions do not hold for this instance.
class TransformError : public Error {
 public:
  using Error::Error;
};

}  // namespace diner
