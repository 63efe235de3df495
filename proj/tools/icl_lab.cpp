#include "icl/cli.hpp"

int main(int argc, char** argv) { return icl::dispatch(argc, argv); }
