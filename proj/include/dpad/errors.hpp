#pragma once

#include <stdexcept>
#include <string>

namespace dpad {

// Common base so callers can catch everything the library throws.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape/rank mismatches between tensors, or between a checkpoint and a model.
struct DimensionError : Error {
  using Error::Error;
};

// Math applied outside its domain (log of a non-positive value, softmax over a
// fully masked row, normalizing a negative-sum row, ...).
struct DomainError : Error {
  using Error::Error;
};

// A scalar argument is outside its legal range (temperature <= 0, prior not in
// (0,1), noise ratio < 0, ...).
struct ParameterError : Error {
  using Error::Error;
};

// Malformed input files (CSV, checkpoint, scores); messages carry a location.
struct FormatError : Error {
  using Error::Error;
};

// An API precondition does not hold (loss is not scalar, evaluation without
// labels, empty sample selection, mismatched series lengths, ...).
struct ContractError : Error {
  using Error::Error;
};

// Bad run configuration: unknown keys, missing files, invalid combinations.
struct ConfigError : Error {
  using Error::Error;
};

// A series is too short to produce a single training sample.
struct InsufficientDataError : Error {
  using Error::Error;
};

// NaN or Inf showed up where finite values are required.
struct NumericError : Error {
  using Error::Error;
};

// Filesystem failures (cannot open/read/write).
struct IoError : Error {
  using Error::Error;
};

}  // namespace dpad
