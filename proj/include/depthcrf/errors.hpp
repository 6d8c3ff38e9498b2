#pragma once

#include <stdexcept>
#include <string>

namespace depthcrf {

// Shape/axis mismatches between tensors.
struct DimError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid argument values (zero pool size, non-divisible channels, ...).
struct ArgError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid or inconsistent model/run configuration.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed file contents (PPM/PFM/checkpoint/manifest).
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Metric evaluation over an empty valid-pixel set.
struct EvalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values where finite ones are required (training abort).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace depthcrf
