// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "mergeforge/cli/commands.hpp"

int main(int argc, char** argv) {
    return mergeforge::cli::run(argc, argv, std::cout, std::cerr);
}
