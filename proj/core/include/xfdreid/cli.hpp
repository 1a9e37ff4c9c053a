#pragma once

#include <string>
#include <vector>

namespace xfdreid::cli {

// Subcommand dispatcher behind the xfdreid binary. Returns the process exit
// code: 0 success, 1 domain error (typed message on stderr), 2 usage error.
int dispatch(int argc, const char* const* argv);

// Same, for tests: args exclude the program name, e.g. {"eval", "--help"}.
int dispatch(const std::vector<std::string>& args);

}  // namespace xfdreid::cli
