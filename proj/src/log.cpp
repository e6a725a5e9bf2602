#include "mebinncd/log.hpp"

#include <cstdlib>

#include <spdlog/sinks/stdout_color_sinks.h>

namespace mebinncd {

void init_logging() {
    static const auto logger = spdlog::stderr_color_mt("mebinncd");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%H:%M:%S.%e] [%^%l%$] %v");
    const char* env = std::getenv("MEBINNCD_LOG");
    spdlog::set_level(env ? spdlog::level::from_str(env) : spdlog::level::warn);
}

}  // namespace mebinncd
