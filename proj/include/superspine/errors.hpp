#pragma once

#include <stdexcept>
#include <string>

namespace superspine {

/// Root of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A point was evaluated outside the spatial domain.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// An argument violates an operation precondition (negative input, bad time, ...).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// The model itself is inconsistent or degenerate for the requested operation.
class ModelError : public Error {
 public:
  using Error::Error;
};

/// A grid is too coarse for the requested operation.
class ResolutionError : public Error {
 public:
  using Error::Error;
};

/// An iterative numerical method failed to converge.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A time stepper blew up; carries a suggested step size.
class StabilityError : public Error {
 public:
  StabilityError(const std::string& what, double suggested_dt)
      : Error(what), suggested_dt_(suggested_dt) {}
  double suggested_dt() const noexcept { return suggested_dt_; }

 private:
  double suggested_dt_;
};

/// A simulation exceeded a configured resource cap.
class ResourceError : public Error {
 public:
  using Error::Error;
};

/// A scenario document is malformed; `field` names the offending JSON path.
class ScenarioError : public Error {
 public:
  ScenarioError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

}  // namespace superspine
