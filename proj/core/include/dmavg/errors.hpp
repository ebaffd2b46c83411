// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace dmavg {

// Base for every error raised by the library. kind() is the stable
// machine-readable category reported by the command line tool.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "invalid-argument"; }
};

class NumericFailure : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "numeric-failure"; }
};

class TrainingFailure : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "training-failure"; }
};

class NotAvailable : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "not-available"; }
};

class IoError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "io-error"; }
};

}  // namespace dmavg
