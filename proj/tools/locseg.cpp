#include "cli.hpp"

int main(int argc, char** argv) { return locseg::cli::run(argc, argv); }
