#ifndef PEMA_ERRORS_H
#define PEMA_ERRORS_H

#include <cstdint>
#include <stdexcept>
#include <string>

namespace pema {

// Caller supplied bad data or configuration. The CLI maps these to exit 1.
class UserError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public UserError {
 public:
  using UserError::UserError;
};

class NumericInputError : public UserError {
 public:
  using UserError::UserError;
};

class IndexError : public UserError {
 public:
  using UserError::UserError;
};

class ConfigError : public UserError {
 public:
  using UserError::UserError;
};

class InputError : public UserError {
 public:
  using UserError::UserError;
};

// Malformed or truncated binary file. `offset` is the byte position at
// which the reader gave up.
class FormatError : public UserError {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : UserError(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

// API misuse, e.g. mutating frozen weights.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Socket-level failure: connect refused, peer closed, short read.
class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The peer answered, but with an error frame or an unexpected payload.
class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IntegrityError : public ProtocolError {
 public:
  using ProtocolError::ProtocolError;
};

}  // namespace pema

#endif  // PEMA_ERRORS_H
