#include <iostream>
#include <string>
#include <vector>

#include "htr/cli.hpp"

int main(int argc, char** argv) {
  return htr::cli::run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
