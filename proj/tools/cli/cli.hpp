#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace deepcsp::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Runs one `deepcsp` invocation. `args` excludes the program name.
/// Returns kExitOk, kExitFailure (runtime error) or kExitUsage (bad flags).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace deepcsp::cli
