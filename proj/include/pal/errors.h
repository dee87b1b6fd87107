#pragma once

#include <stdexcept>
#include <string>

namespace pal {

struct PalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed input record. The message names the file and line/record.
struct ParseError : PalError {
    using PalError::PalError;
};

// Invalid configuration value (bad fractions, unknown keys, ...).
struct ConfigError : PalError {
    using PalError::PalError;
};

// Caller violated an operation precondition.
struct UsageError : PalError {
    using PalError::PalError;
};

// Token sequence exceeds the backend context window.
struct LengthError : PalError {
    using PalError::PalError;
};

// Backend transport or protocol failure (external adapter, NLI service).
struct BackendError : PalError {
    using PalError::PalError;
};

// Training hit a non-finite loss.
struct TrainingAborted : PalError {
    using PalError::PalError;
};

// A pipeline stage was asked to run without its upstream artifacts.
struct DependencyError : PalError {
    using PalError::PalError;
};

}  // namespace pal
