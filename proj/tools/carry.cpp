#include "../src/cli/cli.hpp"

int main(int argc, char** argv) { return carry::cli::run(argc, argv); }
