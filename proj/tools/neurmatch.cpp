#include <unistd.h>

#include "neurmatch/cli.hpp"

int main(int argc, char** argv) { return neurmatch::cli::run(argc, argv, environ); }
