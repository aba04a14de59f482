#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fedkei {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller passed malformed input (shape mismatch, non-finite value, bad range).
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// Bad run configuration; the CLI maps this to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Key already present in a keyed store.
class ConflictError : public Error {
 public:
  using Error::Error;
};

/// A finite-difference oracle evaluated a non-finite objective.
class OracleFailure : public Error {
 public:
  using Error::Error;
};

/// An internal invariant was found broken.
class InvariantViolation : public Error {
 public:
  using Error::Error;
};

/// No prior modules exist for the requested snapshot.
class EmptyPool : public Error {
 public:
  using Error::Error;
};

/// Messages arrived out of protocol order, or a required value was never produced.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// A barrier was reached without every client's report.
class IncompleteRound : public Error {
 public:
  using Error::Error;
};

/// Metric is not defined for the given labels (e.g. a single class).
class UndefinedMetric : public Error {
 public:
  using Error::Error;
};

/// Loss became non-finite during an optimization loop.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::size_t step)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}

  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace fedkei
