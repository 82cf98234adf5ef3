#pragma once

#include <stdexcept>
#include <string>

namespace ppc {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not fit the operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced or a domain precondition on a real value failed.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Inconsistent or unparsable configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Missing, corrupt or incompatible data/checkpoint files.
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace ppc
