#include "decoysh/cli.hpp"

int main(int argc, char** argv) { return decoysh::run_cli(std::vector<std::string>(argv, argv + argc)); }
