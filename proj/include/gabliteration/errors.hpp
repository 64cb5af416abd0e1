#pragma once

#include <stdexcept>
#include <string>

namespace gabl {

// Base class for everything thrown by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad argument values, shape mismatches, non-finite inputs.
struct InvalidInputError : Error {
    using Error::Error;
};

// An iterative method hit its cap or produced non-finite values.
struct NumericFailureError : Error {
    using Error::Error;
};

// Malformed container bytes; message carries the byte offset.
struct FormatError : Error {
    using Error::Error;
};

// Checkpoint/config disagreement or invalid configuration.
struct ConfigError : Error {
    using Error::Error;
};

// Layer or element index out of range.
struct IndexError : Error {
    using Error::Error;
};

// On-disk element type we do not support.
struct UnsupportedDtypeError : Error {
    using Error::Error;
};

// Rank-deficient matrix where an invertible one is required.
struct SingularityError : Error {
    using Error::Error;
};

// Input that is structurally valid but degenerate (e.g. zero mean difference).
struct DegenerateInputError : Error {
    using Error::Error;
};

// A synthetic-model construction could not satisfy its own guarantees.
struct ConstructionError : Error {
    using Error::Error;
};

// Filesystem failure; message carries the path.
struct IoError : Error {
    using Error::Error;
};

// CLI misuse (exit code 2).
struct UsageError : Error {
    using Error::Error;
};

}  // namespace gabl
