#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace sudosys::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kUsage = 1;    // bad arguments or configuration
inline constexpr int kRuntime = 2;  // the run itself failed

// args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::istream& in, std::ostream& out, std::ostream& err);

}  // namespace sudosys::cli
