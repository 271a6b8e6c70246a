#include "imtsp/cli.hpp"

int main(int argc, char** argv) { return imtsp::cli::run(argc, argv); }
