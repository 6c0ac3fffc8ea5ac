#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace multiformer {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUserError = 1;
inline constexpr int kExitInternalError = 2;

/// Entry point of the `multiformer` tool. args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Turns trailing `--a.b value` / `--a.b=value` / `a.b=value` tokens into `a.b=value` overrides.
std::vector<std::string> collect_overrides(const std::vector<std::string>& extras);

}  // namespace multiformer
