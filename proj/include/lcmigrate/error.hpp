#pragma once

#include <stdexcept>
#include <string>

namespace lcmigrate {

/// Raised when input data violates a documented contract (shape mismatch,
/// malformed file, invariant violation). The CLI maps it to exit code 2.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace lcmigrate
