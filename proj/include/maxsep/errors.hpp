#pragma once

#include <stdexcept>

namespace maxsep {

/// Operand dimensions do not chain.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A file could not be decoded; the message names the offending location.
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Decoded data violates a structural invariant it claims to satisfy.
struct IntegrityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A subsampling request exceeds what the dataset holds.
struct CapacityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// An experiment configuration is malformed or inconsistent.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A numeric routine left its domain (e.g. a factorization broke down).
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Input is degenerate for the requested statistic (zero-norm vectors).
struct DegenerateInputError : std::domain_error {
  using std::domain_error::domain_error;
};

/// The statistic has no defined value on this input (zero denominator).
struct UndefinedScoreError : std::domain_error {
  using std::domain_error::domain_error;
};

}  // namespace maxsep
