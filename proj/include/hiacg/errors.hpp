#pragma once

#include <stdexcept>
#include <string>

namespace hiacg {

// All recoverable failures are thrown as one of these. The CLI maps any
// Error to exit code 2; anything else is a bug.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Unreadable input bytes (MIDI, containers). Carries the byte offset.
struct ParseError : Error {
    size_t offset;
    ParseError(const std::string& msg, size_t off)
        : Error(msg + " (at byte " + std::to_string(off) + ")"), offset(off) {}
};

// Structurally valid input with nothing usable in it.
struct EmptyContentError : Error {
    using Error::Error;
};

// Dimension mismatches.
struct ShapeError : Error {
    using Error::Error;
};

// Out-of-range values, bad arguments.
struct ValueError : Error {
    using Error::Error;
};

// Operation called in the wrong object state (untrained model, missing grad).
struct StateError : Error {
    using Error::Error;
};

// Inconsistent configuration.
struct ConfigError : Error {
    using Error::Error;
};

}  // namespace hiacg
