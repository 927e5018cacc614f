#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>

namespace caw::logging {

enum class Level { error = 0, warn = 1, info = 2, debug = 3 };

/// Resolved once from CAW_LOG_LEVEL in {error, warn, info, debug};
/// defaults to warn.
inline Level threshold() {
    static Level level = [] {
        const char* env = std::getenv("CAW_LOG_LEVEL");
        if (env == nullptr) {
            return Level::warn;
        }
        if (std::strcmp(env, "error") == 0) {
            return Level::error;
        }
        if (std::strcmp(env, "warn") == 0) {
            return Level::warn;
        }
        if (std::strcmp(env, "info") == 0) {
            return Level::info;
        }
        if (std::strcmp(env, "debug") == 0) {
            return Level::debug;
        }
        return Level::warn;
    }();
    return level;
}

inline void write(Level level, const std::string& message) {
    if (level > threshold()) {
        return;
    }
    static const char* names[] = {"error", "warn", "info", "debug"};
    std::fprintf(stderr, "[caw:%s] %s\n", names[static_cast<int>(level)], message.c_str());
}

inline void error(const std::string& m) { write(Level::error, m); }
inline void warn(const std::string& m) { write(Level::warn, m); }
inline void info(const std::string& m) { write(Level::info, m); }
inline void debug(const std::string& m) { write(Level::debug, m); }

} // namespace caw::logging
