#pragma once

#include <stdexcept>
#include <string>

namespace unlearn {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem / stream failures. Training fails closed on these.
struct IoError : Error {
  using Error::Error;
};

// Stored bytes disagree with their checksum or expected layout.
struct CorruptionError : Error {
  using Error::Error;
};

// NaN/Inf detected in gradients or state. Fail closed.
struct NumericFault : Error {
  using Error::Error;
};

// Caller violated a documented precondition (bad index, missing sample, ...).
struct PreconditionError : Error {
  using Error::Error;
};

// Format version or config digest differs from the recorded run pins.
struct PinDriftError : Error {
  using Error::Error;
};

// WAL / manifest / chain verification failed where an operation requires it.
struct IntegrityError : Error {
  using Error::Error;
};

}  // namespace unlearn
