#pragma once

#include <stdexcept>
#include <string>

namespace darkvrai {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor extents.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the autodiff graph (detached loss, freed graph, ...).
class GraphError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value or unknown configuration key.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A capture condition outside the configured vocabulary.
class VocabularyError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Missing, truncated or malformed file.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class NanLossError : public Error {
 public:
  using Error::Error;
};

}  // namespace darkvrai
