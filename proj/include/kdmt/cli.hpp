#pragma once

namespace kdmt {

// Entry point of the `kdmt` tool. Returns the process exit code: 0 on
// success, 2 for configuration errors, 3 for data errors, 4 for contract
// violations. Diagnostics go to stderr as one line.
int run_cli(int argc, char** argv);

}  // namespace kdmt
