#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace sketchssl {

/// Command-line entry point, exposed for in-process testing. args excludes
/// the program name. Exit codes: 0 success, 1 usage or configuration error,
/// 2 data error, 3 numerical divergence.
int dispatch(const std::vector<std::string>& args, std::ostream& out,
             std::ostream& err);

/// Convenience overload writing to std::cout / std::cerr.
int dispatch(const std::vector<std::string>& args);

}  // namespace sketchssl
