#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace dddr::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

/// Runs one subcommand. `args` excludes the program name. Errors are reported
/// on `err` as a single line:
///   error kind=<usage|data|numeric> msg="<json-escaped text>"
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dddr::cli
