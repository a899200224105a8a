#include <iostream>

#include "diner/cli.hpp"

extern char** environ;

int main(int argc, char** argv) { return diner::cli::run(argc, argv, std::cout, std::cerr, environ); }
