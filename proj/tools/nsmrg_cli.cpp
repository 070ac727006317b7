#include "nsmrg/cli.hpp"

int main(int argc, char** argv) { return nsmrg::run_cli(argc, argv); }
