#include "seqimpute/cli.hpp"

int main(int argc, char** argv) { return seqimpute::cli::run(argc, argv); }
