// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "dmavg_cli/app.hpp"

int main(int argc, char** argv) { return dmavg::cli::run_cli(argc, argv, std::cout, std::cerr); }
