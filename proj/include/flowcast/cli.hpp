#ifndef FLOWCAST_CLI_HPP
#define FLOWCAST_CLI_HPP

#include <iosfwd>
#include <string>
#include <vector>

namespace flowcast::cli {

/// Dispatches the subcommands (generate, train, evaluate, plot). `args` are
/// the tokens after the program name. Returns the process exit code: 0 on
/// success, nonzero with a message on `err` for any failure.
int run(std::vector<std::string> args, std::ostream& out, std::ostream& err);

}  // namespace flowcast::cli

#endif  // FLOWCAST_CLI_HPP
