// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace csdlab {

enum class ErrorKind {
  invalid_token,
  invalid_argument,
  length_mismatch,
  shape_mismatch,
  schedule,
  boundary,
  degenerate,
  position,
  too_large,
  gradient,
  divergence,
  config,
  missing_artifact,
  io,
};

const char* to_string(ErrorKind kind) noexcept;

/// Library error. Every throw site in csdlab uses this type so callers
/// (the CLI in particular) can map failures to exit codes by kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace csdlab
