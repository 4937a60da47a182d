#pragma once

#include <stdexcept>
#include <string>

namespace condhar {

// Every library failure derives from Error so callers can catch one type; the
// subclasses let the CLI map failures onto exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Operand shapes disagree.
class DimensionError : public Error {
public:
    using Error::Error;
};

// A layer, profile or run option is inconsistent with itself.
class ConfigError : public Error {
public:
    using Error::Error;
};

// NaN/Inf produced or detected.
class NumericError : public Error {
public:
    using Error::Error;
};

// Malformed input files, out-of-range labels, empty datasets.
class DataError : public Error {
public:
    using Error::Error;
};

// API misuse (e.g. backward from a non-scalar).
class ContractError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    ParseError(const std::string& msg, std::size_t position)
        : Error(msg + " at position " + std::to_string(position)), position_(position) {}
    std::size_t position() const { return position_; }

private:
    std::size_t position_;
};

// A model spec cannot be realized for the requested input shape.
class ArchitectureError : public Error {
public:
    using Error::Error;
};

}  // namespace condhar
