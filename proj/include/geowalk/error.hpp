#ifndef GEOWALK_ERROR_HPP
#define GEOWALK_ERROR_HPP

#include <stdexcept>
#include <string>

namespace geowalk {

// Base class for everything thrown by this library.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Mismatched vector/matrix dimensions.
struct DimensionError : Error {
    using Error::Error;
};

// Input outside the mathematical domain of an operation (off-manifold point,
// point on/outside the Poincare ball boundary, antipodal logarithm, ...).
struct DomainError : Error {
    using Error::Error;
};

// Invalid user-supplied data (catalog ranges, manifold spec sign, ...).
struct ValidationError : Error {
    using Error::Error;
};

// Invalid run configuration (bad k, unknown config keys, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Malformed file contents; carries line/offset context in the message.
struct ParseError : Error {
    using Error::Error;
};

// File format version not understood by this build.
struct VersionError : Error {
    using Error::Error;
};

// A required upstream artifact (graph, prompt, checkpoint) is missing.
struct DependencyError : Error {
    using Error::Error;
};

// Training produced a non-finite loss; message names the offending step.
struct DivergenceError : Error {
    using Error::Error;
};

}  // namespace geowalk

#endif
