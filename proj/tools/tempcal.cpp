#include <tempcal/cli.hpp>

int main(int argc, char** argv) { return tempcal::cli::run(argc, argv); }
