#pragma once

#include <stdexcept>
#include <string>

namespace udc {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Shape mismatches, non-finite values, misuse of the graph API.
class EngineError : public Error {
 public:
  using Error::Error;
};

/// Invalid arguments to search-space / size-model / search operations.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Malformed bitstreams and container files. Carries the bit offset at
/// which decoding failed when known (-1 otherwise).
class CodecError : public Error {
 public:
  explicit CodecError(const std::string& msg, long long bit_offset = -1)
      : Error(msg), bit_offset_(bit_offset) {}
  long long bit_offset() const { return bit_offset_; }

 private:
  long long bit_offset_;
};

/// File I/O, checkpoint and dataset format errors.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Config parse/validation errors, message names the section/key path.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace udc
