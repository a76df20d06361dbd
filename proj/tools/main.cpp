#include "mvcond/cli.hpp"

int main(int argc, char** argv) { return mvcond::run_cli(argc, argv); }
