// SPDX-License-Identifier: Apache-2.0
//
// Subcommands: train, eval, gradcheck, synth, sweep.
//
// Exit status: 0 success, 1 verification failure (gradcheck), 2 usage or
// configuration error, 3 data error, 4 numeric failure during training.
#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace rankuncert {

/// `args[0]` is the program name. Machine output goes to `out`, diagnostics
/// to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace rankuncert
