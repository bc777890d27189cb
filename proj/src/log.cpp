#include "htr/log.hpp"

#include <cstdlib>
#include <iostream>
#include <mutex>

#include "htr/errors.hpp"

namespace htr {

namespace {

LogLevel& level_slot() {
  static LogLevel level = [] {
    const char* env = std::getenv("HTR_LOG");
    if (env == nullptr || *env == '\0') return LogLevel::info;
    try {
      return parse_log_level(env);
    } catch (const ContractError&) {
      std::cerr << "warning: ignoring unknown HTR_LOG value '" << env << "'\n";
      return LogLevel::info;
    }
  }();
  return level;
}

void emit(LogLevel at, const char* tag, const std::string& msg) {
  if (int(at) > int(log_level())) return;
  static std::mutex mu;
  std::lock_guard lock(mu);
  std::cerr << tag << msg << '\n';
}

}  // namespace

LogLevel log_level() { return level_slot(); }
void set_log_level(LogLevel level) { level_slot() = level; }

LogLevel parse_log_level(const std::string& name) {
  if (name == "error") return LogLevel::error;
  if (name == "info") return LogLevel::info;
  if (name == "debug") return LogLevel::debug;
  throw ContractError("unknown log level '" + name + "' (expected error, info or debug)");
}

void log_error(const std::string& msg) { emit(LogLevel::error, "error: ", msg); }
void log_warn(const std::string& msg) { emit(LogLevel::info, "warning: ", msg); }
void log_info(const std::string& msg) { emit(LogLevel::info, "", msg); }
void log_debug(const std::string& msg) { emit(LogLevel::debug, "debug: ", msg); }

}  // namespace htr
