#pragma once

#include <string>
#include <vector>

namespace smi::cli {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitValidation = 2;
constexpr int kExitMissing = 3;

// args[0] is the program name. A "--config FILE" of key=value lines is expanded
// into long flags placed before the command-line flags, which therefore win.
int run(const std::vector<std::string>& args);

}  // namespace smi::cli
