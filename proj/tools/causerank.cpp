#include "causerank/cli.hpp"

int main(int argc, char** argv) { return causerank::cli::run(argc, argv); }
