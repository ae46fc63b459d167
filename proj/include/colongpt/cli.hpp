#pragma once

#include <iosfwd>

namespace colongpt::cli {

/// Full command-line entry point. Returns 0 on success, 1 usage error,
/// 2 data error, 3 numeric divergence.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace colongpt::cli
