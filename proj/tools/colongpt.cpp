#include <iostream>

#include "colongpt/cli.hpp"

int main(int argc, char** argv) { return colongpt::cli::run(argc, argv, std::cout, std::cerr); }
