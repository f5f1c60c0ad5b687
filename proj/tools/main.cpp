// Copyright 2026 The pipeplan Authors
// SPDX-License-Identifier: Apache-2.0

#include <unistd.h>

#include <cstdlib>
#include <iostream>

#include "pipeplan/cli.hpp"

int main(int argc, char** argv) {
  pipeplan::CliEnvironment env;
  const char* no_color = std::getenv("NO_COLOR");
  env.color = isatty(STDOUT_FILENO) && !(no_color && *no_color);
  return pipeplan::run({argv + 1, argv + argc}, std::cout, std::cerr, env);
}
