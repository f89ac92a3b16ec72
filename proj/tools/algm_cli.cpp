#include "algm/cli.hpp"

int main(int argc, char** argv) { return algm::cli::run_cli(argc, argv); }
