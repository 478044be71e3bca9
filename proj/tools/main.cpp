#include <iostream>

#include "usplat/service.hpp"

int main(int argc, char** argv) { return usplat::run_cli(argc, argv, std::cout, std::cerr); }
