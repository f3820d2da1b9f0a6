#pragma once

#include <stdexcept>
#include <string>

namespace bncde {

// Validation problems (bad arguments, malformed inputs) use the standard
// std::invalid_argument / std::domain_error types directly.  The two classes
// below exist so callers (notably the CLI) can map failures to distinct exit
// codes.

// Non-finite losses, failed iterations, broken numerical contracts.
struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

// Filesystem failures; the message always names the offending path.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace bncde
