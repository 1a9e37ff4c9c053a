#include "xfdreid/cli.hpp"

int main(int argc, char** argv) { return xfdreid::cli::dispatch(argc, argv); }
