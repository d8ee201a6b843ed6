// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: teacher | train | eval.
#pragma once

#include <ostream>

namespace csdlab::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,  ///< I/O and other runtime failures
  kUsage = 2,
  kConfig = 3,
  kDivergence = 4,
  kMissingArtifact = 5,
};

/// Parses argv, runs the command and maps errors to exit codes.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace csdlab::cli
