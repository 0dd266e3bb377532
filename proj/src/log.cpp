#include "dualinc/log.hpp"

#include <iostream>

namespace dualinc {

namespace {
LogSink& sink() {
    static LogSink s;
    return s;
}
}  // namespace

LogSink set_warning_sink(LogSink s) {
    LogSink prev = std::move(sink());
    sink() = std::move(s);
    return prev;
}

void log_warning(const std::string& message) {
    if (sink()) {
        sink()(message);
    } else {
        std::cerr << "warning: " << message << '\n';
    }
}

}  // namespace dualinc
