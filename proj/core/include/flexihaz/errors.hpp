#pragma once

#include <stdexcept>
#include <string>

namespace flexihaz {

// Every error raised by the library derives from Error so callers (the CLI in
// particular) can map categories to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid user configuration: widths, grid sizes, levels, flag values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Mismatched dimensions between parameters, caches and inputs.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file. Carries the 1-based data row when known (0 otherwise).
class IngestionError : public Error {
 public:
  IngestionError(const std::string& msg, std::size_t row = 0)
      : Error(msg), row_(row) {}
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

/// Overflow or loss of finiteness inside the likelihood.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Non-finite gradients or an impossible train/validation split.
class TrainingError : public Error {
 public:
  using Error::Error;
};

/// Cox initializer failures: no events, singular partial-likelihood information.
class EstimationError : public Error {
 public:
  using Error::Error;
};

/// Singular or ill-conditioned information, missing uncensored data.
class InferenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace flexihaz
