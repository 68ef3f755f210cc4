#pragma once

#include <stdexcept>
#include <string>

namespace m2i2 {

// Base for every error raised by the library. Subclasses name the failure
// category so callers (and the CLI) can report a one-line diagnostic.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

// Violated precondition of an operation.
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

// Non-finite value produced by a forward op or seen in a gradient.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace m2i2
