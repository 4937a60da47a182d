#include <iostream>

#include "condhar/cli.hpp"

int main(int argc, char** argv) { return condhar::run_cli(argc, argv, std::cout, std::cerr); }
