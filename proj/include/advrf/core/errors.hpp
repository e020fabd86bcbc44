#ifndef ADVRF_CORE_ERRORS_HPP_
#define ADVRF_CORE_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace advrf {

// Shape or axis disagreement between tensors.
struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& what) : std::runtime_error(what) {}
};

// Caller passed a value outside an operation's documented domain.
struct InvalidArgument : std::runtime_error {
  explicit InvalidArgument(const std::string& what) : std::runtime_error(what) {}
};

// A module contract was violated (e.g. stepping a frozen ParamSet).
struct ContractViolation : std::runtime_error {
  explicit ContractViolation(const std::string& what) : std::runtime_error(what) {}
};

// Filesystem / serialization failure.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite value where training cannot continue.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace advrf

#endif  // ADVRF_CORE_ERRORS_HPP_
