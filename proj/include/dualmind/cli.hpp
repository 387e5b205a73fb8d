#pragma once
// Operator command surface: collect / train / eval / fewshot / gradcheck /
// export-attn. Every command parses a declared key set (unknown keys are
// rejected), optionally loads a --config file (flags override it), writes a
// resolved-config snapshot plus a run manifest into its output directory, and
// returns exit code 0 only when the run completed and all outputs were
// written.

#include <iosfwd>
#include <string>
#include <vector>

namespace dm {

// Dispatches `args` (argv without the program name). Streams receive normal
// and diagnostic output; no direct stdout/stderr use, so tests can capture.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dm
