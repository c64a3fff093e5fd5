// Copyright 2026 The mtcap Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace mtcap {

enum class ErrorCode {
  kInvalidArgument = 1,
  kDimension = 2,
  kConfig = 3,
  kIo = 4,
  kNumeric = 5,
  kRange = 6,
  kFormat = 7,
  kInternal = 8,
};

// Every failure the library raises is an mtcap::Error; the C API maps the
// code onto its status enum.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) {
    throw Error(code, message);
  }
}

}  // namespace mtcap
