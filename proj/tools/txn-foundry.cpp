#include "txnf/cli.hpp"

int main(int argc, char** argv) { return txnf::dispatch(argc, argv); }
