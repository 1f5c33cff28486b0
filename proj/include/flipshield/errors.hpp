#ifndef FLIPSHIELD_ERRORS_HPP
#define FLIPSHIELD_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace flipshield {

// Invalid user-supplied configuration (bad hyperparams, empty sets, unknown ids).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape or dimension mismatch between tensors.
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Index or bit position outside the valid range.
struct RangeError : std::out_of_range {
    explicit RangeError(const std::string& msg) : std::out_of_range(msg) {}
};

// Malformed or truncated persisted data; message names the offending field.
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Persisted data with an unsupported format version.
struct VersionError : FormatError {
    explicit VersionError(const std::string& msg) : FormatError(msg) {}
};

// Mitigation placement referencing layers that must not or do not exist.
struct PlacementError : std::runtime_error {
    explicit PlacementError(const std::string& msg) : std::runtime_error(msg) {}
};

// Paired inputs (golden/faulty lists, traces) that do not line up.
struct PairingError : std::runtime_error {
    explicit PairingError(const std::string& msg) : std::runtime_error(msg) {}
};

// Unparseable text input (CSV, JSON); message carries the location.
struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace flipshield

#endif // FLIPSHIELD_ERRORS_HPP
