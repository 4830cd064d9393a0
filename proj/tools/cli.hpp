#pragma once

#include <iosfwd>

namespace embscale {

// Runs the command-line tool. Returns the process exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace embscale
