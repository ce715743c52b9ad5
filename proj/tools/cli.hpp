#pragma once

#include <ostream>

namespace esi::cli {

// Exit status: 0 success, 1 usage or validation error, 2 runtime failure.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace esi::cli
