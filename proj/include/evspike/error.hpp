#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace evspike {

/// Base of every error raised by the library. The CLI maps the concrete
/// subclasses onto process exit codes.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Malformed container: wrong magic, unsupported version, bad checksum.
class FormatError : public Error {
public:
  using Error::Error;
};

/// A binary blob ended before a complete record could be read.
class TruncationError : public FormatError {
public:
  TruncationError(const std::string& what, std::uint64_t offset)
      : FormatError(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

private:
  std::uint64_t offset_;
};

/// Data that parses but violates an invariant (geometry, shapes, labels).
class ValidationError : public Error {
public:
  using Error::Error;
};

/// Invalid user-supplied configuration (ROI, factors, model options).
class ConfigError : public Error {
public:
  using Error::Error;
};

/// Fixed-point accumulator left its 32-bit range.
class OverflowError : public Error {
public:
  using Error::Error;
};

/// A count does not fit the container's integer fields.
class CapacityError : public Error {
public:
  using Error::Error;
};

/// Training diverged (non-finite loss or gradient).
class NumericError : public Error {
public:
  using Error::Error;
};

/// File-system failure (missing input, unwritable output).
class IoError : public Error {
public:
  using Error::Error;
};

}  // namespace evspike
