#pragma once

#include <string>
#include <vector>

namespace neurmatch::cli {

inline constexpr const char* kVersion = "1.0.0";

// Entry point of the `neurmatch` binary. Returns the process exit code:
// 0 success, 2 usage, 3 data or format error, 4 numeric failure.
int run(int argc, char** argv, char** envp = nullptr);

// Convenience for tests: args excludes the program name.
int run(const std::vector<std::string>& args, char** envp = nullptr);

}  // namespace neurmatch::cli
