#include <iostream>
#include <string>
#include <vector>

#include "telldrive/cli/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return telldrive::cli::run(args, std::cout, std::cerr);
}
