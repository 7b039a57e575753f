#pragma once

#include <stdexcept>
#include <string>

namespace tracformer {

// Error taxonomy mirrors the CLI exit codes: usage 2, config 3, data 4,
// numeric 5. Library code throws; the CLI maps to codes at the boundary.

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape/domain violations on tensor ops. A programming error at call sites,
// but surfaced as a distinct type so tests can assert on it.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct DomainError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Mask sampling exhausted its rejection budget.
struct SamplingError : NumericError {
  using NumericError::NumericError;
};

// A Denoiser broke carry-over / zero-masking / normalization at eval time.
struct DenoiserContractError : NumericError {
  using NumericError::NumericError;
};

}  // namespace tracformer
