#pragma once

#include <functional>
#include <string>

namespace dualinc {

using LogSink = std::function<void(const std::string&)>;

// Warnings go to stderr unless a sink is installed; returns the previous sink.
LogSink set_warning_sink(LogSink sink);
void log_warning(const std::string& message);

}  // namespace dualinc
