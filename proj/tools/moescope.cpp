#include "moescope/cli.hpp"

int main(int argc, char** argv) { return moescope::cli::run(argc, argv); }
