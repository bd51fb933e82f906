#include "cli.hpp"

int main(int argc, char** argv) { return disagg::cli::run_command(argc, argv); }
