#include <iostream>

#include "detwin/cli.hpp"

int main(int argc, char** argv) { return detwin::run_cli(argc, argv, std::cout, std::cerr); }
