#include "tfm/log.hpp"

#include <cstdlib>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

namespace tfm {

void init_logging(const std::string& fallback) {
  const char* env = std::getenv("TFM_LOG_LEVEL");
  const std::string name = env != nullptr && *env != '\0' ? env : fallback;
  auto level = spdlog::level::from_str(name);
  if (level == spdlog::level::off && name != "off") level = spdlog::level::info;
  auto logger = spdlog::get("tfm");
  if (!logger) logger = spdlog::stderr_color_mt("tfm");
  spdlog::set_default_logger(logger);
  spdlog::set_level(level);
  spdlog::set_pattern("[%l] %v");
}

}  // namespace tfm
