#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace vitscope {

// Row-major so that one row is one token.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration values or geometry.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Shape or range mismatch in caller-provided data.
class InputError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

/// Training diverged (non-finite loss) or cannot proceed.
class TrainingError : public Error {
 public:
  using Error::Error;
};

/// An artifact was produced from different upstream inputs than the ones
/// currently configured.
class StaleArtifactError : public Error {
 public:
  using Error::Error;
};

class UnsupportedError : public Error {
 public:
  using Error::Error;
};

}  // namespace vitscope
