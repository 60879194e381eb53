#pragma once

#include <stdexcept>
#include <string>

namespace slipsense {

/// Process exit codes used by the command line tool.
enum class ExitCode : int {
    ok = 0,
    usage = 1,
    config = 2,
    data = 3,
    numerical = 4,
    dependency = 5,
    internal = 6,
};

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual ExitCode exit_code() const noexcept { return ExitCode::internal; }
};

/// Invalid or inconsistent configuration values.
class ConfigError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const noexcept override { return ExitCode::config; }
};

/// Malformed, missing or too-short data.
class DataError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const noexcept override { return ExitCode::data; }
};

/// Non-finite values, singular matrices, diverging solvers or trainers.
class NumericalError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const noexcept override { return ExitCode::numerical; }
};

/// A pipeline stage was asked to run before its inputs exist.
class DependencyError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const noexcept override { return ExitCode::dependency; }
};

/// An object was used before it was fitted or initialised.
class StateError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const noexcept override { return ExitCode::internal; }
};

ExitCode exit_code_for(const std::exception& e) noexcept;

} // namespace slipsense
