#include "stan/cli.hpp"

int main(int argc, char** argv) { return stan::dispatch(argc, argv); }
