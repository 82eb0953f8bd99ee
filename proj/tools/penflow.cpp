#include "penflow/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return penflow::cli::run(argc, argv, std::cout, std::cerr); }
