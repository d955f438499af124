#include "ckptdiff/config.hpp"

int main(int argc, char** argv) { return ckptdiff::run_cli(argc, argv); }
