#include "gadms/cli.hpp"

int main(int argc, char** argv) { return gadms::cli::run(argc, argv); }
