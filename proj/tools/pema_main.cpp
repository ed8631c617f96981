#include <iostream>
#include <string>
#include <vector>

#include "pema/cli.h"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return pema::run_cli(args, std::cout, std::cerr);
}
