#include "cli_app.hpp"

int main(int argc, char** argv) { return fxq::cli::run(argc, argv); }
