#include "ctxdet/cli.hpp"

int main(int argc, char** argv) { return ctxdet::run_cli(argc, argv); }
