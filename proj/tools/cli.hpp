// Command-line front end. Every run writes its outputs plus run.json (the
// resolved configuration) and timing.json into one output directory.

#ifndef GRADFLOW_TOOLS_CLI_HPP_
#define GRADFLOW_TOOLS_CLI_HPP_

#include <stdexcept>

namespace gradflow::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitNumerical = 2;

/// Bad keys, bad values, missing inputs.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// argv[0] is the program name. Returns the process exit code.
int cli_run(int argc, const char* const* argv);

}  // namespace gradflow::cli

#endif  // GRADFLOW_TOOLS_CLI_HPP_
