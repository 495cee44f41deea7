#pragma once

#include <stdexcept>
#include <string>

namespace iap {

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Operation called on an object in the wrong lifecycle state
/// (missing gradients, frozen tensor, empty task set, ...).
struct StateError : std::logic_error {
  using std::logic_error::logic_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace iap
