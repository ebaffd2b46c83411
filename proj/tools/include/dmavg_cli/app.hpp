// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <ostream>

namespace dmavg::cli {

// Exit codes of the command line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitLocked = 3;

// Parses arguments, runs one command and prints a JSON status line to `out`
// or a JSON error object to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dmavg::cli
