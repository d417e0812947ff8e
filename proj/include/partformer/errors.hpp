#pragma once

#include <stdexcept>
#include <string>

namespace pf {

// Base for all library errors. CLI maps ConfigError/DataError to exit code 1,
// NumericError to exit code 2.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

struct DataError : Error {
  explicit DataError(const std::string& msg) : Error(msg) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Violated call contract (bad argument combination, broken precondition).
struct ContractError : Error {
  explicit ContractError(const std::string& msg) : Error(msg) {}
};

}  // namespace pf
