#pragma once

#include <stdexcept>
#include <string>

namespace peclr {

// Error categories map onto the CLI exit-code contract:
// usage/precondition -> 2, I/O -> 3, numeric failure -> 4.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace peclr
