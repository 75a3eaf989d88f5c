#pragma once

#include <stdexcept>
#include <string>

namespace dtmamba {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Extents or ranks that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration (even kernel extents, bad widths, missing fields).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Input data violating a documented precondition.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Reduction over an empty selection (e.g. an all-false mask).
class EmptyReductionError : public DataError {
 public:
  using DataError::DataError;
};

/// Non-finite values or singular arithmetic.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A metric that is undefined for the given samples.
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Timer too coarse for the requested measurement.
class MeasurementError : public Error {
 public:
  using Error::Error;
};

}  // namespace dtmamba
