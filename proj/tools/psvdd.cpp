#include <iostream>

#include "psvdd/cli.hpp"

int main(int argc, char** argv) { return psvdd::cli::run(argc, argv, std::cout, std::cerr); }
