#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "semstyle/layers.hpp"

int main(int argc, char** argv) {
    semstyle::configure_runtime();
    doctest::Context context(argc, argv);
    return context.run();
}
