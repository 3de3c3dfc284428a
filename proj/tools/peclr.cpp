#include "peclr/cli.hpp"

int main(int argc, char** argv) { return peclr::cli::run(argc, argv); }
