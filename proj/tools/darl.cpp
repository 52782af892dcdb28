#include "darl/cli.hpp"

int main(int argc, char** argv) { return darl::cli::run(argc, argv); }
