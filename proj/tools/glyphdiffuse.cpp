#include <vector>

#include "glyphdiffuse/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return gdf::cli::run(std::move(args));
}
