#include <iostream>

#include "figrot/cli.hpp"

int main(int argc, char** argv) { return figrot::dispatch(argc, argv, std::cout, std::cerr); }
