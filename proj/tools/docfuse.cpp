#include "docfuse/cli.hpp"

int main(int argc, char** argv) { return docfuse::cli_main(argc, argv); }
