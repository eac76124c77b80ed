#include <iostream>

#include "fmc/cli.hpp"

int main(int argc, char **argv) { return fmc::run_cli(argc, argv, std::cout, std::cerr); }
