#include <vector>

#include "sketchssl/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return sketchssl::dispatch(args);
}
