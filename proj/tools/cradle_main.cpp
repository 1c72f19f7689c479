#include "cradle/cli.hpp"

int main(int argc, char** argv) { return cradle::cli::run(argc, argv); }
