#pragma once

#include <stdexcept>
#include <string>

namespace multiformer {

/// Invalid user-supplied configuration (bad key, bad value, bad flag).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A dataset file is missing, undecodable, or inconsistent with its manifest.
class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or map dimensions violate an operation's contract.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss or diverged optimization.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Metric inputs are inconsistent (id collisions, missing depth, ...).
class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace multiformer
