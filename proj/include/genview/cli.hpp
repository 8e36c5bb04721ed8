#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace genview::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitDomainError = 1;
inline constexpr int kExitUsage = 2;

// Parses and runs one subcommand. Never throws: domain errors map to 1,
// usage errors to 2 (with help text on `err`).
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

// Convenience for tests; args excludes the program name.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace genview::cli
