#pragma once

#include <stdexcept>
#include <string>

namespace nwcrf {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Extent / rank disagreement between operands.
struct ShapeError : Error {
  using Error::Error;
};

// Value outside an operation's mathematical domain (e.g. log of a
// nonpositive probability).
struct DomainError : Error {
  using Error::Error;
};

// A precondition stated by an operation's contract was violated.
struct ContractError : Error {
  using Error::Error;
};

// A softmax row (or a whole attention window) with no unmasked entry.
struct DegenerateError : ContractError {
  using ContractError::ContractError;
};

// Non-finite value produced where the contract promises finiteness.
struct NumericError : Error {
  using Error::Error;
};

// Malformed external input (image file, config file).
struct FormatError : Error {
  using Error::Error;
};

// Bad key / value / missing file in a run configuration.
struct ConfigError : Error {
  using Error::Error;
};

// Checkpoint problems map to their own CLI exit code.
struct CheckpointError : Error {
  using Error::Error;
};
struct CheckpointFormatError : CheckpointError {
  using CheckpointError::CheckpointError;
};
struct CheckpointCorruptionError : CheckpointError {
  using CheckpointError::CheckpointError;
};

}  // namespace nwcrf
