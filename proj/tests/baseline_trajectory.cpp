// Built against the core compiled without any enhancer code paths.
#include <fstream>
#include <iostream>

#include "trajectory.hpp"

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: baseline_trajectory OUT\n";
    return 1;
  }
  std::ofstream f(argv[1], std::ios::binary);
  f << fdtr::testing::run_trajectory();
  return f ? 0 : 2;
}
