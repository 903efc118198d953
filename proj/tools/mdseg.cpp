#include "mdseg/cli.hpp"

int main(int argc, char** argv) { return mdseg::run_command(std::vector<std::string>(argv, argv + argc)); }
