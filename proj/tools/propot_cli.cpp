#include "propot/cli.hpp"

int main(int argc, char** argv) { return propot::run_cli(argc, argv); }
