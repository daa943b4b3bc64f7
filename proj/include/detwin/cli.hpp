#pragma once

// Command-line front end: subcommands for simulation, training, evaluation,
// the three pipeline phases, the clutter GAN and report conversion.

#include <iosfwd>

namespace detwin {

namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int gate_fail = 1;
inline constexpr int usage = 2;  ///< bad arguments, config or lifecycle order
inline constexpr int runtime = 3;
}  // namespace exit_code

/// Environment variable naming the default output root.
inline constexpr const char* kOutEnv = "DETWIN_OUT";

/// Parses the arguments, runs one subcommand and returns the exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace detwin
