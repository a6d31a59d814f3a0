#pragma once

#include <stdexcept>
#include <string>

namespace stan {

// Error taxonomy shared by every layer. The CLI maps these onto exit codes;
// tests match on the concrete type.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor dimension disagreements (names both shapes in the message).
struct ShapeError : Error {
    using Error::Error;
};

// Caller violated an operation's stated precondition.
struct ContractError : Error {
    using Error::Error;
};

// Signal shorter than a kernel / window / span requires.
struct InputTooShortError : Error {
    using Error::Error;
};

// Malformed input file; carries the byte offset where parsing gave up.
struct ParseError : Error {
    ParseError(const std::string& msg, std::size_t byte_offset)
        : Error(msg + " (byte offset " + std::to_string(byte_offset) + ")"),
          offset(byte_offset) {}
    std::size_t offset;
};

struct UnsupportedFormatError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

// Dataset cannot support the requested operation (missing class, too few folds).
struct DataError : Error {
    using Error::Error;
};

// NaN/Inf surfaced, or training diverged.
struct NumericError : Error {
    using Error::Error;
};

}  // namespace stan
