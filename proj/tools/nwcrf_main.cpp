#include <string>
#include <vector>

#include "nwcrf/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return nwcrf::cli::run(std::move(args));
}
