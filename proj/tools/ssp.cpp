#include <iostream>
#include <string>
#include <vector>

#include "ssp/cli/cli.hpp"

int main(int argc, char** argv) {
    ssp::cli::tune_allocator();
    const std::vector<std::string> args(argv + 1, argv + argc);
    return ssp::cli::run_cli(args, std::cout, std::cerr);
}
