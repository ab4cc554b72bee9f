#include "cli.hpp"

int main(int argc, char** argv) {
    return smmini::cli::run_cli(argc, argv);
}
