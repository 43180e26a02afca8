// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace upcycle {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or rank mismatch between tensor operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid argument value (fractions out of range, empty grids, bad labels).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// Key sets or per-key shapes disagree between checkpoints / task vectors.
class IncompatibilityError : public Error {
 public:
  using Error::Error;
};

// Malformed serialized file. `field` names the first violated field.
class FormatError : public Error {
 public:
  FormatError(std::string field, const std::string& detail)
      : Error("format error [" + field + "]: " + detail), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

class StorageError : public Error {
 public:
  using Error::Error;
};

// Numerically degenerate input (e.g. power iteration on a zero matrix).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

// An expert whose delta is identically zero cannot seed an Arrow router row.
class DegenerateExpertError : public DegenerateInputError {
 public:
  using DegenerateInputError::DegenerateInputError;
};

class TrainingError : public Error {
 public:
  TrainingError(int step, const std::string& detail)
      : Error("training error at step " + std::to_string(step) + ": " + detail), step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

}  // namespace upcycle
