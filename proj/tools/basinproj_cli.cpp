#include "basinproj/cli.hpp"

int main(int argc, char** argv) { return basinproj::run_cli(argc, argv); }
