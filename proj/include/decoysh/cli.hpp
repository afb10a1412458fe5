#pragma once

// The decoysh command line: serve, ingest, replay, score, report.

#include <string>
#include <vector>

namespace decoysh {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitConfig = 2,
  kExitInput = 3,
  kExitRuntime = 4,
};

/// argv[0] is the program name. Blocks until `serve` is signalled.
int run_cli(const std::vector<std::string>& args);

}  // namespace decoysh
