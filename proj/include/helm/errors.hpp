#pragma once

#include <stdexcept>
#include <string>

namespace helm {

// Error families map one-to-one onto CLI exit codes (see commands.hpp).

/// File missing, unreadable, or unwritable.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input: bad hierarchy, bad config, shape mismatch, unknown label.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values or degenerate numerical state.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace helm
