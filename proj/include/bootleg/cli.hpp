#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "bootleg/config.hpp"
#include "bootleg/data.hpp"
#include "bootleg/error.hpp"

namespace bootleg {

enum ExitCode { kExitOk = 0, kExitConfig = 1, kExitRuntime = 2 };

/// Config-class failures map to exit 1, everything else to exit 2.
int exit_code_for(ErrorCode code);

/// Training (held_out = false) or evaluation split named by the config.
Dataset make_dataset(const RunConfig& cfg, bool held_out);

/// Full command line including argv[0]. Errors go to `err` as one line:
///   error: code=<Code> msg=<text>
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace bootleg
