#pragma once

#include <stdexcept>
#include <string>

namespace dualprune {

// Error taxonomy shared by the library and the CLI.
// The CLI maps ConfigError to exit code 2 and every DataError subtype to 3;
// verification failures (not exceptions) exit with 1.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Invalid configuration: bad flag values, inconsistent parameters.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Invalid payload: non-finite values, inconsistent shapes, degenerate inputs.
class DataError : public Error {
public:
    using Error::Error;
};

// Structurally malformed file.
class FormatError : public DataError {
public:
    using DataError::DataError;
};

// Well-formed file using an encoding this library does not handle.
class UnsupportedError : public DataError {
public:
    using DataError::DataError;
};

// Filesystem failure; message carries the offending path.
class IoError : public DataError {
public:
    using DataError::DataError;
};

// Numeric range violation (e.g. kernel exponent overflow).
class NumericError : public DataError {
public:
    using DataError::DataError;
};

}  // namespace dualprune
