#include "prtraj/pipeline.hpp"

int main(int argc, char** argv) { return prtraj::pipeline::cli_run(argc, argv); }
