#ifndef PEMA_CLI_H
#define PEMA_CLI_H

#include <iosfwd>
#include <string>
#include <vector>

namespace pema {

// Exit codes of run_cli.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUserError = 1;  // bad flag, config, input or peer
inline constexpr int kExitInternal = 2;

// The `pema` command line. `args` excludes the program name. Reports and
// decoded text go to `out` unless a path is given; diagnostics go to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace pema

#endif  // PEMA_CLI_H
