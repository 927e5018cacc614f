#pragma once

#include <stdexcept>
#include <string>

namespace caw {

// Base class for everything thrown by this library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shape/rank mismatches and empty-tensor misuse.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Inputs outside an operation's documented domain (e.g. a non-stochastic
// row passed to the KL divergence).
class DomainError : public Error {
public:
    using Error::Error;
};

// API contract violations: non-scalar backward root, mutating a graph
// node, re-snapshotting mid-training, and similar caller bugs.
class ContractError : public Error {
public:
    using Error::Error;
};

// backward() called on a graph that a previous backward already consumed.
class GraphConsumedError : public ContractError {
public:
    using ContractError::ContractError;
};

// Non-finite values where finite ones are required (loss blow-up, bad
// finite-difference evaluations).
class NumericError : public Error {
public:
    using Error::Error;
};

// Invalid configuration values or malformed/unknown config keys.
class ConfigError : public Error {
public:
    using Error::Error;
};

// File I/O failures.
class IoError : public Error {
public:
    using Error::Error;
};

// Bad magic or malformed container structure.
class FormatError : public IoError {
public:
    using IoError::IoError;
};

// File format version not supported by this build.
class VersionMismatchError : public IoError {
public:
    using IoError::IoError;
};

// Payload ends before the header-declared length.
class TruncatedPayloadError : public IoError {
public:
    using IoError::IoError;
};

// Header-declared payload length disagrees with the actual content.
class PayloadSizeError : public IoError {
public:
    using IoError::IoError;
};

} // namespace caw
