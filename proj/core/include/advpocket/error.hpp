#pragma once

#include <stdexcept>
#include <string>

namespace advpocket {

/// Base class for every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor or layer shapes do not line up.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration value or combination.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A loss, gradient or training run produced a non-finite value.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Thresholds cannot be computed, or were computed for a different model/config.
class CalibrationError : public Error {
public:
    using Error::Error;
};

/// Malformed or unreadable data file.
class DataError : public Error {
public:
    enum class Kind { io, bad_magic, truncated, count_mismatch, bad_format, insufficient };

    DataError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

}  // namespace advpocket
