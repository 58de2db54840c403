#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace mskl {

// Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

// Entry point of the mskl command line. args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mskl
