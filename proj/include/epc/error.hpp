#pragma once

#include <stdexcept>
#include <string>

namespace epc {

/// Inconsistent extents, ranks or mode indices.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A constrained subproblem has an empty feasible set.
class InfeasibleError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// The damped Hessian (or a derived inner system) is singular or lacks
/// curvature along the constraint gradient. Callers react by raising the
/// damping parameter.
class DampingTooSmall : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN/Inf found in an input that must be finite.
class NonFiniteError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A file could not be opened, read, written, or parsed.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace epc
