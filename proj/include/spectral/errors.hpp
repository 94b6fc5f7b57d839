#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace spectral {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape mismatch, non-skew input, bad parameter values.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Input outside the mathematical domain (e.g. non-SPD matrix, -1 in a spectrum).
class DomainError : public Error {
 public:
  using Error::Error;
};

// A documented precondition of a fast path does not hold (e.g. ||N||_F >= 1).
class PreconditionError : public Error {
 public:
  using Error::Error;
};

// Loss of positivity, non-finite values, solver failure.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Raised when a black-box objective returns a non-finite value.
class EvaluationError : public Error {
 public:
  EvaluationError(const std::string& what, std::vector<double> point)
      : Error(what), point_(std::move(point)) {}
  const std::vector<double>& point() const { return point_; }

 private:
  std::vector<double> point_;
};

}  // namespace spectral
