#include "vs2/cli.hpp"

int main(int argc, char** argv) { return vs2::cli::run(argc, argv); }
