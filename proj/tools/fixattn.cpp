#include <iostream>

#include "fixattn/cli.hpp"

int main(int argc, char** argv) { return fixattn::cli::run_cli(argc, argv, std::cout, std::cerr); }
