#pragma once

#include <stdexcept>
#include <string>

namespace telldrive {

/// Invalid configuration value. `field()` names the offending key.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::runtime_error(field + ": " + message), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Operand shapes are incompatible.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An API was called outside its precondition (stepping a finished episode,
/// backward on a non-scalar, empty batches, ...).
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Checkpoint could not be read: bad magic, CRC failure, architecture mismatch.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace telldrive
