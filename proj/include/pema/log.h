#ifndef PEMA_LOG_H
#define PEMA_LOG_H

#include <string_view>

namespace pema::log {

enum class Level { kDebug = 0, kInfo = 1, kWarning = 2, kError = 3, kOff = 4 };

void set_level(Level level);
Level level();

void debug(std::string_view msg);
void info(std::string_view msg);
void warning(std::string_view msg);
void error(std::string_view msg);

}  // namespace pema::log

#endif  // PEMA_LOG_H
