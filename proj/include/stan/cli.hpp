#pragma once

#include <string>
#include <vector>

namespace stan {

// Runs one subcommand. Returns the process exit code: 0 on success, 1 on a
// runtime failure (categorized diagnostic on stderr), 2 on a usage error.
// `args` excludes the program name and is in natural order.
int dispatch(const std::vector<std::string>& args);
int dispatch(int argc, const char* const* argv);

}  // namespace stan
