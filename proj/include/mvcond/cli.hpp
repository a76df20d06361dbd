#pragma once

// Command-line entry point shared by the mvcond tool and the tests.
//
//   mvcond [--config PATH] [--seed N] [--threads N] [--out DIR] <command> ...
//   commands: dataset, train, synth, eval, gradcheck, ablate
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime or training error.

#include <iosfwd>
#include <string>
#include <vector>

namespace mvcond {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, char** argv);

}  // namespace mvcond
