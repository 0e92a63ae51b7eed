#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace stmoe {

/// Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
/// `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace stmoe
