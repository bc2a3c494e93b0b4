#include <iostream>

#include "nesc/cli.hpp"

int main(int argc, char** argv) { return nesc::cli_main(argc, argv, std::cout, std::cerr); }
