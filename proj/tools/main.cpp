#include "odeinf/cli.hpp"

int main(int argc, char** argv) { return odeinf::cli::run(argc, argv); }
