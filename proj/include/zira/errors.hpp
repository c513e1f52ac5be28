#pragma once

#include <stdexcept>
#include <string>

namespace zira {

/// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Incompatible tensor/branch shapes.
struct ShapeError : Error {
    using Error::Error;
};

/// Invalid argument values (labels out of range, empty inputs, zero-norm rows, ...).
struct DomainError : Error {
    using Error::Error;
};

/// Backward called on a tensor that is not a scalar output of the given graph.
struct GraphError : Error {
    using Error::Error;
};

/// NaN/Inf encountered where finite values are required.
struct NumericError : Error {
    using Error::Error;
};

/// Operation requires model state that has not been established (e.g. fused
/// inference before consolidation).
struct StateError : Error {
    using Error::Error;
};

/// Pretraining failed to reach the target accuracy within its step budget.
struct ConvergenceError : Error {
    using Error::Error;
};

/// Training diverged (loss above the divergence threshold).
struct TrainingError : Error {
    using Error::Error;
};

/// A verification oracle detected an inconsistency (e.g. non-deterministic
/// build function handed to the gradient checker).
struct OracleError : Error {
    using Error::Error;
};

/// Malformed or unreadable checkpoint file.
struct CheckpointError : Error {
    using Error::Error;
};

/// Config file violates the schema.
struct ConfigError : Error {
    using Error::Error;
};

/// Report generation failed (missing/empty run directory).
struct ReportError : Error {
    using Error::Error;
};

} // namespace zira
