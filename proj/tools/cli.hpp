#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace pivot::cli {

/// Runs one command line (args[0] is the program name). Returns the exit code;
/// messages go to `out` and errors to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace pivot::cli
