#include "infoflow/eval/cli.hpp"

int main(int argc, char** argv) { return infoflow::run_cli(argc, argv); }
