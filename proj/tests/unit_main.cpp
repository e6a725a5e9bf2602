#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "mebinncd/log.hpp"

int main(int argc, char** argv) {
    mebinncd::init_logging();
    return doctest::Context(argc, argv).run();
}
