#include "polytrace/cli.hpp"

int main(int argc, char** argv) { return polytrace::cli::run_cli(argc, argv); }
