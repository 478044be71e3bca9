#pragma once

#include <stdexcept>
#include <string>

namespace usplat {

/// A numeric parameter is outside its documented domain (beta <= 0, empty bounds, ...).
struct InvalidParameter : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A triangular solve hit a non-positive pivot.
struct SingularMatrix : std::domain_error {
  using std::domain_error::domain_error;
};

/// Malformed or inconsistent file contents.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Caller broke a precondition (index out of range, mismatched buffers).
struct ContractViolation : std::logic_error {
  using std::logic_error::logic_error;
};

/// Training produced a non-finite loss. `snapshot` names the diagnostic checkpoint, if any.
struct TrainingDiverged : std::runtime_error {
  TrainingDiverged(const std::string& what, std::string snapshot_path)
      : std::runtime_error(what), snapshot(std::move(snapshot_path)) {}
  std::string snapshot;
};

}  // namespace usplat
