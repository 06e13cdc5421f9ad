#include "modarith/cli.hpp"

int main(int argc, char** argv) { return modarith::run_cli(argc, argv, std::cout, std::cerr); }
