// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "csdlab_cli/cli.hpp"

int main(int argc, char** argv) { return csdlab::cli::run_cli(argc, argv, std::cout, std::cerr); }
