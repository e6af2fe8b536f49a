#pragma once

#include <stdexcept>
#include <string>

namespace infoflow {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// Symmetric factorization hit a non-positive pivot.
class NotPositiveDefiniteError : public Error {
 public:
  NotPositiveDefiniteError(std::size_t minor, double pivot)
      : Error("matrix is not positive definite: leading minor " +
              std::to_string(minor) + " has pivot " + std::to_string(pivot)),
        minor_(minor) {}

  /// 1-based order of the first leading minor that failed.
  std::size_t minor() const noexcept { return minor_; }

 private:
  std::size_t minor_;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

/// Conditioning vector lies so far outside the training support that every
/// grid cell underflows.
class OutOfDistributionError : public Error {
 public:
  using Error::Error;
};

}  // namespace infoflow
