#include "fluxinv/cli.hpp"

int main(int argc, char** argv) { return fluxinv::cli::run(argc, argv); }
