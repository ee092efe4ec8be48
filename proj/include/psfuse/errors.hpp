#pragma once

#include <stdexcept>
#include <string>

namespace psfuse {

/// Invalid user-supplied configuration (bad sizes, non-positive scales, ...).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Degenerate or inconsistent geometry (zero-area triangle, bad bbox, ...).
struct GeometryError : std::runtime_error {
    explicit GeometryError(const std::string& msg) : std::runtime_error(msg) {}
};

/// A location fell outside the mesh.
struct OutOfDomainError : std::runtime_error {
    explicit OutOfDomainError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Factorization failure, non-finite intermediate, or similar.
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed input file or record.
struct InputError : std::runtime_error {
    explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace psfuse
