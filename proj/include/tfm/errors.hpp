#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tfm {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes or layer geometry do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A computation produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Unknown task, layer, or head.
class LookupError : public Error {
 public:
  using Error::Error;
};

/// Mask pair violates m <= n, or task masks overlap.
class InvalidMaskError : public Error {
 public:
  using Error::Error;
};

/// Packed mask data decodes to the reserved state 3.
class CorruptionError : public Error {
 public:
  using Error::Error;
};

/// Growth would exceed a layer's width cap.
class CapacityError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary or text input. Carries the byte offset (or line) where parsing stopped.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

/// An object was used in a state that does not allow the call (e.g. incomplete matrix).
class StateError : public Error {
 public:
  using Error::Error;
};

/// Caller broke an API contract (missing cache, training a non-newest task, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

}  // namespace tfm
