#include "seqmix/cli.hpp"

int main(int argc, char** argv) { return seqmix::cli::dispatch(argc, argv); }
