#pragma once

#include <stdexcept>
#include <string>

namespace marf {

// Base of every error the library throws. Subclasses of UserError describe
// bad input or configuration (CLI exit code 1); anything else is internal or
// numerical (exit code 2).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UserError : public Error {
 public:
  using Error::Error;
};

class DecodeError : public UserError {
 public:
  using UserError::UserError;
};

class FormatError : public UserError {
 public:
  using UserError::UserError;
};

class IoError : public UserError {
 public:
  using UserError::UserError;
};

class ArgumentError : public UserError {
 public:
  using UserError::UserError;
};

class ConfigError : public UserError {
 public:
  using UserError::UserError;
};

class DegenerateSceneError : public UserError {
 public:
  using UserError::UserError;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace marf
