#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace physprobe {

/// Base class for all physprobe errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class InvalidSpecError : public Error {
public:
    using Error::Error;
};

/// Two-body separation fell below r_min_guard; carries the failing step.
class TrajectoryTruncatedError : public Error {
public:
    TrajectoryTruncatedError(const std::string& msg, std::size_t step)
        : Error(msg), failing_step(step) {}
    std::size_t failing_step;
};

class InvalidSplitError : public Error {
public:
    using Error::Error;
};

class UnsupportedTargetError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class UnknownBlockError : public Error {
public:
    using Error::Error;
};

/// Ridge system is singular at alpha = 0.
class DegenerateDesignError : public Error {
public:
    using Error::Error;
};

/// Per-step probe fit has too few samples.
class UnderdeterminedError : public Error {
public:
    using Error::Error;
};

/// Training loss became non-finite. The last finite-loss parameters are kept
/// by the caller-visible checkpoint stream.
class DivergenceError : public Error {
public:
    using Error::Error;
};

class ZeroVarianceError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

} // namespace physprobe
