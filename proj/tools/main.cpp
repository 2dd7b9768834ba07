#include "lmm/cli.hpp"

int main(int argc, char** argv) { return lmm::cli::run(argc, argv); }
