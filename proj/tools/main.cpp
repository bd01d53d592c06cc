#include "kdmt/cli.hpp"

int main(int argc, char** argv) { return kdmt::run_cli(argc, argv); }
