#pragma once

#include <stdexcept>
#include <string>

namespace qlab {

// Base class for everything thrown by the library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Shape or extent mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced or consumed where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// An argument value is outside its documented range.
class ParameterError : public Error {
 public:
  using Error::Error;
};

// Object is in the wrong state for the requested operation.
class StateError : public Error {
 public:
  using Error::Error;
};

// API contract violation (caller bug rather than bad data).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Malformed configuration file; message carries a line number.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Metric streams cannot be aligned (mismatched cadence).
class AlignmentError : public Error {
 public:
  using Error::Error;
};

}  // namespace qlab
