#pragma once

#include <stdexcept>
#include <string>

namespace graftlab {

// Shape or dimension disagreement between tensors, configs or buffers.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Token id, target id or position outside its valid range.
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// An operation produced NaN or Inf from finite inputs.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Misuse of the autodiff tape (second backward, foreign or detached vars).
class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Malformed file or document (bad magic, bad JSON, version mismatch).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A checkpoint whose tensors disagree with its own or an expected config.
class ShapeError : public FormatError {
 public:
  using FormatError::FormatError;
};

// Invalid configuration: model config, scheme spec, layer range, registry.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Data generation or corpus problems (pool exhaustion, unknown placeholder).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace graftlab
