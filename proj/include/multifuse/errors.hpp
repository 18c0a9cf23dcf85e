#ifndef MULTIFUSE_ERRORS_HPP
#define MULTIFUSE_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace multifuse {

/// Shape or domain precondition of an operation was violated by its inputs.
class ContractError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A configuration value is out of range or inconsistent.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// An API was used in the wrong state (e.g. mode change mid-backward).
class UsageError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// NaN/Inf detected, or training diverged.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// File-format or I/O failure.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Cohort/run validation failures raised while loading artifacts from disk.
class LoadError : public std::runtime_error {
public:
    enum class Kind { MissingFile, ShapeMismatch, Asymmetric, OutOfRange, Malformed };

    LoadError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

} // namespace multifuse

#endif
