#pragma once

#include <string>

namespace tfm {

/// Sets the spdlog level from TFM_LOG_LEVEL (error, warn, info, debug),
/// falling back to `fallback`. Output goes to stderr.
void init_logging(const std::string& fallback = "info");

}  // namespace tfm
