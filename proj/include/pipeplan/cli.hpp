// Copyright 2026 The pipeplan Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace pipeplan {

const char* version();

struct CliEnvironment {
  /// Bold table headers; the binary sets this for a terminal unless
  /// NO_COLOR is set.
  bool color = false;
};

/// Runs one `pipeplan` command. `args` excludes the program name. Returns
/// 0 on success, 1 when no feasible configuration exists and 2 for bad
/// input (unknown flag, unreadable file, schema violation).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
        const CliEnvironment& env = {});

}  // namespace pipeplan
