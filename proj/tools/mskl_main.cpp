#include <iostream>
#include <string>
#include <vector>

#include "mskl/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return mskl::run_cli(args, std::cout, std::cerr);
}
