#include <iostream>

#include "condsim/cli.hpp"

int main(int argc, char** argv) { return condsim::cli::cli_main(argc, argv, std::cout, std::cerr); }
