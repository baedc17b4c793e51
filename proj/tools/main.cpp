#include "cli.hpp"

int main(int argc, char** argv) { return gradflow::cli::cli_run(argc, argv); }
