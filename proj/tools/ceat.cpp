#include "ceat/cli.hpp"

int main(int argc, char** argv) { return ceat::run_cli(argc, argv); }
