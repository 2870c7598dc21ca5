#pragma once

#include <iosfwd>

namespace figrot {

// Runs one `figrot <subcommand> [--flag value]...` invocation. Returns 0 on
// success, 2 on usage errors and 1 on runtime failures; failures print one
// JSON line {"error": kind, "message": ...} to `err`.
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace figrot
