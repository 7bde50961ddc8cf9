// Copyright 2026 The kprune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace kprune {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A precondition of an operation was violated by the caller (shape
/// mismatch, out-of-domain parameter, inconsistent mask lengths).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// Bad user input: malformed sample files, out-of-range token ids,
/// impossible budgets.
class InputError : public Error {
 public:
  using Error::Error;
};

enum class LoadErrorKind {
  io,
  bad_magic,
  unsupported_version,
  truncated,
  bad_manifest,
  shape_mismatch,
  non_finite,
  validation,
};

inline const char* to_string(LoadErrorKind kind) {
  switch (kind) {
    case LoadErrorKind::io: return "io";
    case LoadErrorKind::bad_magic: return "bad_magic";
    case LoadErrorKind::unsupported_version: return "unsupported_version";
    case LoadErrorKind::truncated: return "truncated";
    case LoadErrorKind::bad_manifest: return "bad_manifest";
    case LoadErrorKind::shape_mismatch: return "shape_mismatch";
    case LoadErrorKind::non_finite: return "non_finite";
    case LoadErrorKind::validation: return "validation";
  }
  return "unknown";
}

/// Failure while reading or writing a .kpz container.
class LoadError : public Error {
 public:
  LoadError(LoadErrorKind kind, const std::string& what)
      : Error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  LoadErrorKind kind() const noexcept { return kind_; }

 private:
  LoadErrorKind kind_;
};

namespace detail {

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractViolation(message);
}

}  // namespace detail
}  // namespace kprune
