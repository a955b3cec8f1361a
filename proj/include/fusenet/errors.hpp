#pragma once

#include <stdexcept>
#include <string>

namespace fusenet {

// Error taxonomy. Everything derives from std::runtime_error so callers can
// catch coarsely; the subtype tells them whether retrying makes sense.

/// Mismatched tensor dimensions, empty pooling windows, bad axes.
struct shape_error : std::runtime_error {
    explicit shape_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid argument values: probabilities out of range, bad labels, bad config.
struct value_error : std::runtime_error {
    explicit value_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Operation called in the wrong order (e.g. backward before forward).
struct state_error : std::runtime_error {
    explicit state_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Non-finite values where finite ones are required.
struct numeric_error : std::runtime_error {
    explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed input files; message carries the line number where known.
struct parse_error : std::runtime_error {
    explicit parse_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Filesystem failures.
struct io_error : std::runtime_error {
    explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace fusenet
