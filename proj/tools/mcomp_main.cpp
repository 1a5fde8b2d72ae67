#include "mcomp/cli.hpp"

int main(int argc, char** argv) { return mcomp::cli::run(argc, argv); }
