#include <string>
#include <vector>

#include "mmfuse/cli.hpp"

int main(int argc, char** argv) {
  return mmfuse::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
