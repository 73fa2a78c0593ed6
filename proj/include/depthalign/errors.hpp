#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace depthalign {

// Base for every error raised by the library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Mismatched heights/widths/channel counts between inputs.
class DimensionError : public Error {
public:
    using Error::Error;
};

// A value outside the mathematical domain of an operation
// (nonpositive depth under a log, query point outside a cell, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

// Malformed tensor file. `offset` is the byte position of the first
// offending byte.
class FormatError : public Error {
public:
    FormatError(const std::string& what, std::size_t offset)
        : Error(what + " (byte offset " + std::to_string(offset) + ")"),
          offset_(offset) {}
    std::size_t offset() const { return offset_; }

private:
    std::size_t offset_;
};

// Too few anchors (or candidates) to run a fit or a sampler.
class InsufficiencyError : public Error {
public:
    using Error::Error;
};

// Singular normal equations where the contract demands full rank.
class RankError : public Error {
public:
    using Error::Error;
};

// A method was asked to run on a scene lacking a required input
// (e.g. region-aware alignment without a label map).
class CapabilityError : public Error {
public:
    using Error::Error;
};

// Iterative numerical procedure failed to reach its tolerance.
class ConvergenceError : public Error {
public:
    using Error::Error;
};

// Reduction over an empty (all-invalid) pixel set.
class EmptyReductionError : public Error {
public:
    using Error::Error;
};

// Filesystem-level failure (missing file, refuse-to-overwrite, ...).
class IoError : public Error {
public:
    using Error::Error;
};

} // namespace depthalign
