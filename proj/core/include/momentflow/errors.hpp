#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace momentflow {

/// Shape or structural contract violated (dimension mismatch, bad index,
/// non-square input where a square one is required, ...).
struct StructuralError : std::runtime_error {
    explicit StructuralError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Numerical failure (non-PD pivot, singular matrix, negative variance
/// beyond tolerance). Carries the offending index when one exists.
struct NumericalError : std::runtime_error {
    std::size_t index = 0;
    explicit NumericalError(const std::string& msg, std::size_t idx = 0)
        : std::runtime_error(msg), index(idx) {}
};

/// Malformed external input. `location` is a byte offset for JSON files
/// and a 1-based line number for CSV files.
struct ParseError : std::runtime_error {
    std::size_t location = 0;
    explicit ParseError(const std::string& msg, std::size_t loc = 0)
        : std::runtime_error(msg), location(loc) {}
};

/// Bad run configuration (unknown flag value, missing file, invalid arch).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Optimisation diverged. Carries the epoch at which the loss went non-finite.
struct TrainingError : std::runtime_error {
    std::size_t epoch = 0;
    explicit TrainingError(const std::string& msg, std::size_t ep = 0)
        : std::runtime_error(msg), epoch(ep) {}
};

}  // namespace momentflow
