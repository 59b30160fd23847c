#include "segprompt/cli.hpp"

int main(int argc, char** argv) { return segprompt::run_cli(argc, argv); }
