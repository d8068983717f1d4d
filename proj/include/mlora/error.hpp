// Copyright (c) 2026, The mlora Authors
// SPDX-License-Identifier: Apache-2.0
//
// Exception types shared by every module. The CLI maps them to exit codes:
// ConfigError / DataError / ShapeError -> 2, NumericError -> 3.

#pragma once

#include <stdexcept>
#include <string>

namespace mlora {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit the op they were fed to.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed input files, out-of-range ids, bad labels.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or arguments.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// NaN / Inf encountered during training or evaluation.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace mlora
