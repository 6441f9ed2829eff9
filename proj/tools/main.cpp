#include "promptseg/cli.hpp"

int main(int argc, char** argv) { return promptseg::run(argc, argv); }
