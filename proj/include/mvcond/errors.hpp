#pragma once

#include <stdexcept>
#include <string>

namespace mvcond {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or rank disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Violated precondition that is not a shape problem (empty lists, non-scalar loss, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf observed at an op boundary while checked mode is on.
class NumericError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

class PoleError : public Error {
 public:
  using Error::Error;
};

class BoundsError : public Error {
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

}  // namespace mvcond
