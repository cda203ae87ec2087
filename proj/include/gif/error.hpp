#ifndef GIF_ERROR_HPP
#define GIF_ERROR_HPP

#include <stdexcept>
#include <string>

namespace gif {

/// Malformed or inconsistent configuration (CLI exit code 2).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Invalid input data: bad files, broken designs, shape mismatches (exit code 3).
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Non-finite values, solver breakdown, diverged training (exit code 4).
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct FormatError : DataError {
    using DataError::DataError;
};
struct BadMagicError : FormatError {
    using FormatError::FormatError;
};
struct VersionMismatchError : FormatError {
    using FormatError::FormatError;
};
struct TruncatedError : FormatError {
    using FormatError::FormatError;
};

struct ShapeError : DataError {
    using DataError::DataError;
};

}  // namespace gif

#endif  // GIF_ERROR_HPP
