#ifndef IOP_TOOLS_CLI_HPP
#define IOP_TOOLS_CLI_HPP

#include <string>
#include <vector>

namespace iop::cli {

// Full command-line entry point. Returns the process exit code:
// 0 success, 2 usage or config error, 3 numerical abort.
int run(const std::vector<std::string>& args);
int run(int argc, char** argv);

}  // namespace iop::cli

#endif  // IOP_TOOLS_CLI_HPP
