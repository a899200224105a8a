#pragma once

#include <iosfwd>

namespace diner::cli {

// Runs one command line (argv[0] is the program name). Returns the process exit
// status: 0 on success, 1 for usage errors, 2 for run-time failures.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err,
        char** environment = nullptr);

}  // namespace diner::cli
