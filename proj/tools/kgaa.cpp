#include "kgaa/cli.hpp"

int main(int argc, char** argv) { return kgaa::cli::run(argc, argv); }
