#include "delay_hjb/cli.hpp"

int main(int argc, char** argv) { return delay_hjb::run_cli(argc, argv); }
