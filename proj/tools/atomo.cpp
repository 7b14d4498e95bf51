#include "atomo/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return atomo::cli::dispatch(std::move(args));
}
