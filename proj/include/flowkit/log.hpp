#pragma once

#include <initializer_list>
#include <string>
#include <string_view>
#include <utility>

// Single-line logfmt records on standard error:
//   ts=2025-01-01T12:00:00.123Z level=info component=collect msg="..." k=v
namespace flowkit::log {

enum class Level { Debug = 0, Info, Warn, Error, Off };

using Field = std::pair<std::string_view, std::string>;

void set_level(Level min_level);
Level level();
void write(Level level, std::string_view component, std::string_view message,
           std::initializer_list<Field> fields = {});

inline void debug(std::string_view c, std::string_view m, std::initializer_list<Field> f = {}) {
  write(Level::Debug, c, m, f);
}
inline void info(std::string_view c, std::string_view m, std::initializer_list<Field> f = {}) {
  write(Level::Info, c, m, f);
}
inline void warn(std::string_view c, std::string_view m, std::initializer_list<Field> f = {}) {
  write(Level::Warn, c, m, f);
}
inline void error(std::string_view c, std::string_view m, std::initializer_list<Field> f = {}) {
  write(Level::Error, c, m, f);
}

// logfmt value quoting.
std::string quote(std::string_view value);

}  // namespace flowkit::log
