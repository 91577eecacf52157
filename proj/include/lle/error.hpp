#pragma once

#include <stdexcept>
#include <string>

namespace lle {

/// Base class for every error thrown by the library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DecodeError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

/// Input outside the mathematical domain of an operator (negative gamma base, non-finite gain).
struct DomainError : Error {
    using Error::Error;
};

struct ShapeError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

/// Target statistic cannot be reached by any admissible parameter.
struct UnreachableError : Error {
    using Error::Error;
};

/// Non-finite loss or gradient encountered during optimisation.
struct NumericError : Error {
    using Error::Error;
};

}  // namespace lle
