#pragma once

#include <stdexcept>
#include <string>

namespace cni {

// Base for all library errors. Subclasses distinguish contract violations
// (caller bugs) from data/state problems so the CLI can map them to exit
// codes and machine-readable diagnostics.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Operand shapes disagree or geometry is invalid.
struct DimensionError : Error {
  using Error::Error;
};

// An index (e.g. a class label) is out of range.
struct IndexError : Error {
  using Error::Error;
};

// Precondition on arguments violated (non-scalar loss, odd sample count, ...).
struct ContractError : Error {
  using Error::Error;
};

// Object used in an invalid state (double backward on one tape, ...).
struct StateError : Error {
  using Error::Error;
};

// A tensor exceeds a configured size cap.
struct SizeError : Error {
  using Error::Error;
};

// Malformed input file; message carries the byte offset where parsing failed.
struct FormatError : Error {
  using Error::Error;
};

// File could not be read or written.
struct IoError : Error {
  using Error::Error;
};

// Training diverged or produced non-finite values.
struct TrainingError : Error {
  using Error::Error;
};

}  // namespace cni
