#pragma once

#include <stdexcept>
#include <string>

namespace ozlab {

// Base for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A documented precondition was violated by the caller.
struct ContractError : Error {
  using Error::Error;
};

struct EnumerationCapError : Error {
  using Error::Error;
};

struct NotIncreasingError : Error {
  using Error::Error;
};

// Generating function never reaches 1 inside its radius of convergence.
struct NoMassGapError : Error {
  using Error::Error;
};

// Step-length support has gcd > 1.
struct PeriodicLawError : Error {
  using Error::Error;
};

struct InsufficientDataError : Error {
  using Error::Error;
};

struct BudgetExhaustedError : Error {
  using Error::Error;
};

struct FitError : Error {
  using Error::Error;
};

}  // namespace ozlab
