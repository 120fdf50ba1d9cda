#pragma once

#include <stdexcept>
#include <string>

namespace cfdt {

// Invalid configuration values (dimensions too small, bad counts, ...).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Random generation could not satisfy its postcondition within bounds.
struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// API misuse: stepping a terminal state, shape mismatch, K < 1, ...
struct UsageError : std::logic_error {
  using std::logic_error::logic_error;
};

// Inconsistent or missing data (no ATE entry for a layout, bad file).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Training diverged (non-finite loss).
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace cfdt
