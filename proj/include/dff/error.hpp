// SPDX-FileCopyrightText: © 2026 DFF-Adapter contributors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace dff {

/// Shape or extent mismatch at an op boundary.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid configuration record (backbone, adapter, dataset, train, run spec).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Caller broke a documented precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class LabelError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Metric undefined for the given input (e.g. AUC without both classes).
class MetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss or parameter during training.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checkpoint / corpus built for a different configuration.
class DigestMismatch : public std::runtime_error {
 public:
  DigestMismatch(std::string expected, std::string found)
      : std::runtime_error("config digest mismatch: expected " + expected + ", found " + found),
        expected_(std::move(expected)),
        found_(std::move(found)) {}

  const std::string& expected() const { return expected_; }
  const std::string& found() const { return found_; }

 private:
  std::string expected_;
  std::string found_;
};

}  // namespace dff
