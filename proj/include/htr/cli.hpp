#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace htr::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Runs the `htr` command line. `argv[0]` is the program name. Results go to
/// `out`, diagnostics to `err`. Returns 0 on success, 1 on a usage error and
/// 2 on a runtime error (including a failed gradcheck).
int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err);

}  // namespace htr::cli
