#include <saerase/cli.hpp>

int main(int argc, char** argv) { return saerase::cli::run(argc, argv); }
