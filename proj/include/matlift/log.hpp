#pragma once

// Minimal logging hook so the library stays free of a logging dependency.
// Applications route messages by installing a sink.

#include <functional>
#include <iostream>
#include <mutex>
#include <string>

namespace matlift {

enum class LogLevel { debug, info, warn, error };

using LogSink = std::function<void(LogLevel, const std::string &)>;

namespace detail {
inline LogSink &log_sink() {
    static LogSink sink = [](LogLevel level, const std::string &msg) {
        if (level >= LogLevel::warn) std::cerr << "matlift: " << msg << '\n';
    };
    return sink;
}
inline std::mutex &log_mutex() {
    static std::mutex m;
    return m;
}
} // namespace detail

inline void set_log_sink(LogSink sink) {
    std::lock_guard lock(detail::log_mutex());
    detail::log_sink() = std::move(sink);
}

inline void log(LogLevel level, const std::string &msg) {
    std::lock_guard lock(detail::log_mutex());
    if (detail::log_sink()) detail::log_sink()(level, msg);
}

} // namespace matlift
