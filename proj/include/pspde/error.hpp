#pragma once

#include <stdexcept>
#include <string>

namespace pspde {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid inputs: bad knots, dimension mismatches, out-of-domain points.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Malformed or inconsistent run configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Factorization failures, rank deficiency, non-convergence that cannot be recovered.
class NumericalError : public Error {
public:
    using Error::Error;
};

/// File system and parsing failures on data files.
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace pspde
