#pragma once

namespace moescope::cli {

// Full command-line entry point; returns the process exit code
// (0 success, 2 validation error, 3 numeric failure).
int run(int argc, const char* const* argv);

}  // namespace moescope::cli
