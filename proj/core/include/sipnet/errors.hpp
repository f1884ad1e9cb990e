#pragma once

#include <stdexcept>
#include <string>

namespace sipnet {

// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor/operation shape mismatch.
struct ShapeError : Error {
  using Error::Error;
};

// Invalid configuration value (bad hyperparameter, malformed config file).
struct ConfigError : Error {
  using Error::Error;
};

// Problems with input data: file format, manifest validation, dimension
// mismatch between data and model.
struct DataError : Error {
  using Error::Error;
};

// Non-finite values where finite ones are required (NaN loss, NaN gradient).
struct NumericError : Error {
  using Error::Error;
};

}  // namespace sipnet
