#include <iostream>

#include "bootleg/cli.hpp"

int main(int argc, char** argv) {
  return bootleg::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
