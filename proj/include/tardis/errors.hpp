#pragma once

#include <stdexcept>
#include <string>

namespace tardis {

// Bad argument or precondition violation (shape mismatch, out-of-range k, ...).
class ArgumentError : public std::invalid_argument {
public:
    explicit ArgumentError(const std::string& what) : std::invalid_argument(what) {}
};

// Malformed or inconsistent external data: parse errors, checksum failures,
// version mismatches, truncated files.
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Non-convergence, divergence, non-finite values.
class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

} // namespace tardis
