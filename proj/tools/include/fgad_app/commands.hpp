// SPDX-License-Identifier: Apache-2.0
#pragma once
// The fgad command surface. run_command parses argv (program name first),
// dispatches to a subcommand and maps failures to exit codes.

#include <iosfwd>
#include <string>
#include <vector>

namespace fgad::app {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitUsage = 2;

int run_command(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err);
int run_command(int argc, const char* const* argv);

}  // namespace fgad::app
