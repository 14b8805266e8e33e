#include "cem/cli.hpp"

int main(int argc, char** argv) { return cem::run_cli(argc, argv); }
