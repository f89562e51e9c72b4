#pragma once

#include <stdexcept>
#include <string>

namespace fsdg {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes or extents are incompatible with the requested operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A value lies outside the mathematical domain of an operation (log of a
/// non-positive number, empty reduction).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A hyperparameter or configuration value is out of range.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// A label or index is out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition of a loss or routine was violated.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A forward or backward pass produced a non-finite value.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace fsdg
