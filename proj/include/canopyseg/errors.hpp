#pragma once

#include <stdexcept>
#include <string>

namespace canopyseg {

// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// File missing, unreadable or unwritable.
struct IoError : Error {
    using Error::Error;
};

// File exists but its content is not what the format requires
// (bad magic, unsupported bit depth, truncation, ...).
struct FormatError : Error {
    using Error::Error;
};

// Two rasters that must share dimensions do not.
struct DimensionError : Error {
    using Error::Error;
};

// A scalar argument is outside its documented domain.
struct ArgumentError : Error {
    using Error::Error;
};

// Tensor shapes incompatible with the requested operation.
struct ShapeError : Error {
    using Error::Error;
};

// An operation was attempted on stale state (e.g. a cleared tape).
struct StateError : Error {
    using Error::Error;
};

// A configuration violates its structural invariants.
struct ConfigError : Error {
    using Error::Error;
};

// A dataset-level precondition failed (empty set, missing ids, ...).
struct DataError : Error {
    using Error::Error;
};

// A ratio with a zero denominator; callers report "n/a".
struct DegenerateError : Error {
    using Error::Error;
};

} // namespace canopyseg
