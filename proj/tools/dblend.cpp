#include "dblend/cli.hpp"

int main(int argc, char** argv) { return dblend::cli_main(argc, argv); }
