#include "caw/cli.hpp"

int main(int argc, char** argv) { return caw::cli::run(argc, argv); }
