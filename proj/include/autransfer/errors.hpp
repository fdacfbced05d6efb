#pragma once

#include <stdexcept>

namespace autransfer {

// Base class for every error thrown by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shapes of tensors, matrices, or configured layers disagree.
struct DimensionError : Error {
  using Error::Error;
};

// A call precondition was violated (bad argument value, label out of
// range, non-binary label, empty input where data is required, ...).
struct ContractError : Error {
  using Error::Error;
};

// Text input could not be parsed; message names the 1-based line.
struct ParseError : Error {
  using Error::Error;
};

// Text parsed but its content is internally inconsistent (bad header,
// wrong field count, value out of the documented range).
struct FormatError : Error {
  using Error::Error;
};

// A checkpoint could not be loaded as a whole model (version or shape
// mismatch). Loading never leaves partial state behind.
struct CheckpointError : Error {
  using Error::Error;
};

// Pretrained backbone does not fit the target configuration.
struct TransferError : Error {
  using Error::Error;
};

// Filesystem failure: missing input, unwritable output.
struct IoError : Error {
  using Error::Error;
};

}  // namespace autransfer
