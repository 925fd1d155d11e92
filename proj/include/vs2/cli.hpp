#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace vs2::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitDomainError = 1;
inline constexpr int kExitUsage = 2;

/// Runs one CLI invocation. args excludes the program name. Help goes to out,
/// diagnostics to err; data only ever goes to files.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int run(int argc, char** argv);

/// Worker count: the flag value when given, else VS2_THREADS, else 1.
std::size_t resolve_threads(std::size_t flag_value);

/// Parses "key = value" lines ('#' comments, blank lines and [section]
/// headers ignored); surrounding quotes on values are stripped.
std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text);

}  // namespace vs2::cli
