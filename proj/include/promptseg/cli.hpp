#pragma once

// Command-line front end. Exit codes: 0 success, 1 domain error (one line on
// stderr starting "error[<kind>]: "), 2 usage error (bad flags, unknown config
// keys, unreadable config file).

#include <iosfwd>
#include <string>
#include <vector>

namespace promptseg {

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace promptseg
