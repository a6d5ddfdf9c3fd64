#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace rawkit {

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitUsage = 2 };

/// Entry point of the `rawkit` command. Progress goes to `out` as JSON lines, errors to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Same, with the arguments that follow the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace rawkit
