#pragma once

#include <string>

namespace htr {

enum class LogLevel { error = 0, info = 1, debug = 2 };

/// Current verbosity. Starts from HTR_LOG (error, info or debug; default info).
LogLevel log_level();
void set_log_level(LogLevel level);
/// Parses "error", "info" or "debug"; throws ContractError otherwise.
LogLevel parse_log_level(const std::string& name);

// Messages go to stderr when the level admits them. Warnings print at info.
void log_error(const std::string& msg);
void log_warn(const std::string& msg);
void log_info(const std::string& msg);
void log_debug(const std::string& msg);

}  // namespace htr
