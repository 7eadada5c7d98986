// SPDX-License-Identifier: Apache-2.0
//
// Minimal diagnostics. Verbosity comes from APL_LOG={error,info,debug};
// warnings are always shown.

#pragma once

#include <cstdlib>
#include <iostream>
#include <string>
#include <string_view>

namespace apl::log {

enum class Level : int { error = 0, info = 1, debug = 2 };

inline Level& level() {
    static Level lvl = [] {
        const char* env = std::getenv("APL_LOG");
        if (env == nullptr) return Level::error;
        std::string_view v(env);
        if (v == "debug") return Level::debug;
        if (v == "info") return Level::info;
        return Level::error;
    }();
    return lvl;
}

inline void warn(const std::string& message) {
    std::cerr << "apl: warning: " << message << '\n';
}

inline void info(const std::string& message) {
    if (level() >= Level::info) std::cerr << "apl: " << message << '\n';
}

inline void debug(const std::string& message) {
    if (level() >= Level::debug) std::cerr << "apl: [debug] " << message << '\n';
}

} // namespace apl::log
