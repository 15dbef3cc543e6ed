#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace dare {

/// Invalid user-supplied configuration (dimensions, hyperparameters, presets).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Matrix or vector dimensions do not agree.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A loss or gradient became non-finite during training.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// CSV or JSON ingestion failed.
class IngestionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A numerical verification harness exceeded its tolerance.
class VerificationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dare
