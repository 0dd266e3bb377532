#pragma once

// JSON form of RunConfig. Parsing is strict: unknown keys and wrongly typed
// values raise ConfigError naming the key.

#include "dualinc/engine.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace dualinc::config {

nlohmann::json to_json(const engine::RunConfig& c);

// Keys absent from j keep their value from base.
engine::RunConfig run_config_from_json(const nlohmann::json& j, const engine::RunConfig& base = {});

const std::vector<std::string>& run_config_keys();

// Throws ConfigError for any key of j outside allowed, prefixed by context.
void reject_unknown_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                         const std::string& context);

}  // namespace dualinc::config
