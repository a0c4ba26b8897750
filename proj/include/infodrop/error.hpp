#pragma once

#include <stdexcept>
#include <string>

namespace infodrop {

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape or dimension disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Input outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value or unknown key.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated file.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Non-finite value or failed numerical routine.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Out-of-range index (e.g. class label).
class IndexError : public Error {
 public:
  using Error::Error;
};

// API misuse (e.g. backward on a non-scalar).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Missing or inconsistent dataset contents.
class DataError : public Error {
 public:
  using Error::Error;
};

// Unknown variable name in a discrete-information query.
class QueryError : public Error {
 public:
  using Error::Error;
};

}  // namespace infodrop
