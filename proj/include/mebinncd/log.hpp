#pragma once

#include <spdlog/spdlog.h>

namespace mebinncd {

/// Applies the MEBINNCD_LOG level (trace|debug|info|warn|error|off); default warn.
void init_logging();

}  // namespace mebinncd
