#pragma once

#include <stdexcept>
#include <string>

namespace stow {

// Shape or extent disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// API called outside its contract (non-scalar loss, empty trajectory, ...).
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// A forward op produced NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed manifest, track file, checkpoint or config file.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace stow
