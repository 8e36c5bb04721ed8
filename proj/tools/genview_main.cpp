#include <iostream>

#include "genview/cli.hpp"

int main(int argc, char** argv) {
  return genview::cli::dispatch(argc, argv, std::cout, std::cerr);
}
