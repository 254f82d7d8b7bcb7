#include "marepo/cli.hpp"

int main(int argc, char** argv) { return marepo::cli::run(argc, argv); }
