#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace surftrap {

/// Runs the command line `args` (without the program name). Exit code 0 on success, 1 for a
/// failed operation and 2 for a usage error; errors go to `err` as one "<category>: message" line.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace surftrap
