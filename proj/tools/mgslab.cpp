#include <string>
#include <vector>

#include "mgslab/cli.hpp"

int main(int argc, char** argv) {
  return mgslab::cli::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
