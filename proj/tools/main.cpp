#include "ere_cli.hpp"

int main(int argc, char** argv) { return ere::cli::run(argc, argv); }
