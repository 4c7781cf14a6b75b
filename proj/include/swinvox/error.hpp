#pragma once

#include <stdexcept>
#include <string>

namespace swinvox {

// Shape/extent violations (mismatched channels, non-divisible grids, ...).
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed files: bad magic, truncation, impossible header fields.
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values where finite math is required.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Inputs that are valid in shape but degenerate in value (zero vector to
// normalize, all-air volume to crop, empty mask surface).
struct DegenerateInputError : std::runtime_error {
    explicit DegenerateInputError(const std::string& msg) : std::runtime_error(msg) {}
};

// Inconsistent run configuration (unknown key, class-count mismatch, ...).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace swinvox
