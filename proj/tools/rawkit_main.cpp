#include <iostream>

#include "rawkit/cli.hpp"

int main(int argc, char** argv) { return rawkit::run_cli(argc, argv, std::cout, std::cerr); }
