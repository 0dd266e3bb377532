#include "dualinc/config.hpp"

#include "dualinc/errors.hpp"

#include <algorithm>
#include <optional>
#include <type_traits>

namespace dualinc::config {

using nlohmann::json;
using engine::RunConfig;

const std::vector<std::string>& run_config_keys() {
    static const std::vector<std::string> keys = {
        "method",          "task_order",          "pool_size",
        "top_m",           "rank",                "batch_size",
        "epochs",          "base_lr",             "pool_lr_scale",       "warmup_ratio",
        "optimizer",       "momentum",            "adam_beta1",
        "adam_beta2",      "adam_eps",            "seed",
        "encoder_seed",    "drop_intrinsic",      "drop_contextual",
        "drop_align_loss", "adapt_position",      "similarity_source",
        "no_low_rank",     "intrinsic_weighting", "trace_weighting",
        "context_include_current", "carry_context_weights", "pool_sharing",
        "rehearsal_fraction", "rehearsal_per_batch", "max_new_tokens"};
    return keys;
}

void reject_unknown_keys(const json& j, const std::vector<std::string>& allowed,
                         const std::string& context) {
    if (!j.is_object()) throw ConfigError(context + ": expected an object");
    for (const auto& [key, _] : j.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            throw ConfigError(context + ": unknown key '" + key + "'");
        }
    }
}

json to_json(const RunConfig& c) {
    json j;
    j["method"] = engine::to_string(c.method);
    j["task_order"] = c.task_order;
    j["pool_size"] = c.pool_size;
    j["top_m"] = c.top_m;
    j["rank"] = c.rank;
    j["batch_size"] = c.batch_size;
    j["epochs"] = c.epochs;
    j["base_lr"] = c.base_lr;
    j["pool_lr_scale"] = c.pool_lr_scale;
    j["warmup_ratio"] = c.warmup_ratio;
    j["optimizer"] = ad::to_string(c.optimizer.kind);
    j["momentum"] = c.optimizer.momentum;
    j["adam_beta1"] = c.optimizer.beta1;
    j["adam_beta2"] = c.optimizer.beta2;
    j["adam_eps"] = c.optimizer.eps;
    j["seed"] = c.seed;
    j["encoder_seed"] = c.encoder_seed;
    j["drop_intrinsic"] = c.ablation.drop_intrinsic;
    j["drop_contextual"] = c.ablation.drop_contextual;
    j["drop_align_loss"] = c.ablation.drop_align_loss;
    j["adapt_position"] = model::to_string(c.ablation.adapt_position);
    j["similarity_source"] = engine::to_string(c.ablation.similarity_source);
    j["no_low_rank"] = c.ablation.no_low_rank;
    j["intrinsic_weighting"] = pool::to_string(c.intrinsic_weighting);
    j["trace_weighting"] = pool::to_string(c.trace_weighting);
    j["context_include_current"] = c.context_include_current;
    j["carry_context_weights"] = c.carry_context_weights;
    j["pool_sharing"] = engine::to_string(c.pool_sharing);
    j["rehearsal_fraction"] = c.rehearsal_fraction;
    j["rehearsal_per_batch"] = c.rehearsal_per_batch;
    j["max_new_tokens"] = c.max_new_tokens;
    return j;
}

namespace {

template <typename T>
void read(const json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError(std::string("'") + key + "' must be a boolean");
    } else if constexpr (std::is_integral_v<T>) {
        const bool negative = v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0;
        if (!v.is_number_integer() || (std::is_unsigned_v<T> && negative)) {
            throw ConfigError(std::string("'") + key + "' must be a non-negative integer");
        }
    } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError(std::string("'") + key + "' must be a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError(std::string("'") + key + "' must be a string");
    }
    out = v.get<T>();
}

template <typename Parse>
auto read_enum(const json& j, const char* key, Parse parse) -> std::optional<decltype(parse(""))> {
    if (!j.contains(key)) return std::nullopt;
    std::string s;
    read(j, key, s);
    try {
        return parse(s);
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("'") + key + "': " + e.what());
    }
}

}  // namespace

RunConfig run_config_from_json(const json& j, const RunConfig& base) {
    reject_unknown_keys(j, run_config_keys(), "run config");
    RunConfig c = base;
    if (auto m = read_enum(j, "method", engine::method_from_string)) c.method = *m;
    if (j.contains("task_order")) {
        const json& v = j.at("task_order");
        if (!v.is_array()) throw ConfigError("'task_order' must be an array of task ids");
        c.task_order.clear();
        for (const auto& x : v) {
            if (!x.is_number_integer()) throw ConfigError("'task_order' must be an array of task ids");
            c.task_order.push_back(x.get<int>());
        }
    }
    read(j, "pool_size", c.pool_size);
    read(j, "top_m", c.top_m);
    read(j, "rank", c.rank);
    read(j, "batch_size", c.batch_size);
    read(j, "epochs", c.epochs);
    read(j, "base_lr", c.base_lr);
    read(j, "pool_lr_scale", c.pool_lr_scale);
    read(j, "warmup_ratio", c.warmup_ratio);
    if (auto k = read_enum(j, "optimizer", ad::optimizer_kind_from_string)) c.optimizer.kind = *k;
    read(j, "momentum", c.optimizer.momentum);
    read(j, "adam_beta1", c.optimizer.beta1);
    read(j, "adam_beta2", c.optimizer.beta2);
    read(j, "adam_eps", c.optimizer.eps);
    read(j, "seed", c.seed);
    read(j, "encoder_seed", c.encoder_seed);
    read(j, "drop_intrinsic", c.ablation.drop_intrinsic);
    read(j, "drop_contextual", c.ablation.drop_contextual);
    read(j, "drop_align_loss", c.ablation.drop_align_loss);
    if (auto p = read_enum(j, "adapt_position", model::adapt_position_from_string)) {
        c.ablation.adapt_position = *p;
    }
    if (auto s = read_enum(j, "similarity_source", engine::similarity_source_from_string)) {
        c.ablation.similarity_source = *s;
    }
    read(j, "no_low_rank", c.ablation.no_low_rank);
    if (auto w = read_enum(j, "intrinsic_weighting", pool::intrinsic_weighting_from_string)) {
        c.intrinsic_weighting = *w;
    }
    if (auto w = read_enum(j, "trace_weighting", pool::trace_weighting_from_string)) {
        c.trace_weighting = *w;
    }
    read(j, "context_include_current", c.context_include_current);
    read(j, "carry_context_weights", c.carry_context_weights);
    if (auto p = read_enum(j, "pool_sharing", engine::pool_sharing_from_string)) c.pool_sharing = *p;
    read(j, "rehearsal_fraction", c.rehearsal_fraction);
    read(j, "rehearsal_per_batch", c.rehearsal_per_batch);
    read(j, "max_new_tokens", c.max_new_tokens);
    c.validate();
    return c;
}

}  // namespace dualinc::config
