#pragma once

namespace propot {

// Entry point shared by the propot binary and the CLI tests.
// Exit codes: 0 ok, 2 usage, 3 data error, 4 numeric failure.
int run_cli(int argc, const char* const* argv);

}  // namespace propot
