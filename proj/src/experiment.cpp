#include "dualinc/experiment.hpp"

#include "dualinc/checkpoint.hpp"
#include "dualinc/config.hpp"
#include "dualinc/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace dualinc::experiment {

using nlohmann::json;
using engine::Method;
using engine::RunConfig;

namespace {

std::string fmt(const char* spec, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, spec, v);
    return buf;
}

std::string exact(double v) { return fmt("%.17g", v); }

bool non_negative_integer(const json& v) {
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& section) {
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    const std::string where = "'" + section + "." + key + "'";
    if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError(where + " must be a boolean");
    } else if constexpr (std::is_integral_v<T>) {
        if (!non_negative_integer(v)) throw ConfigError(where + " must be a non-negative integer");
    } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError(where + " must be a number");
    } else if constexpr (std::is_same_v<T, fs::path>) {
        if (!v.is_string()) throw ConfigError(where + " must be a string");
        out = fs::path(v.get<std::string>());
        return;
    }
    out = v.get<T>();
}

template <typename T>
std::vector<T> read_list(const json& j, const char* key, const std::string& section,
                         const std::function<T(const json&)>& item) {
    const json& v = j.at(key);
    const std::string where = "'" + section + "." + key + "'";
    if (!v.is_array() || v.empty()) throw ConfigError(where + " must be a non-empty array");
    std::vector<T> out;
    for (const auto& x : v) {
        try {
            out.push_back(item(x));
        } catch (const ConfigError& e) {
            throw ConfigError(where + ": " + e.what());
        } catch (const json::exception&) {
            throw ConfigError(where + ": bad element " + x.dump());
        }
    }
    return out;
}

std::uint64_t unsigned_of(const json& x) {
    if (!non_negative_integer(x)) throw ConfigError("expected a non-negative integer, got " + x.dump());
    return x.get<std::uint64_t>();
}

json read_json_file(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw DataError("cannot open " + p.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw DataError(p.string() + ": " + e.what());
    }
}

void write_text(const fs::path& p, const std::string& text) {
    const std::vector<std::uint8_t> bytes(text.begin(), text.end());
    checkpoint::write_file(p, bytes);
}

std::string read_text(const fs::path& p) {
    const auto bytes = checkpoint::read_file(p);
    return std::string(bytes.begin(), bytes.end());
}

json model_config_json(const model::ToyModelConfig& m) {
    return {{"vocab_size", m.vocab_size}, {"dim", m.dim},
            {"layers", m.layers},         {"heads", m.heads},
            {"max_seq_len", m.max_seq_len}, {"feature_dim", m.feature_dim}};
}

std::vector<stream::TaskFamilySpec> family_specs(const ExperimentConfig& c) {
    std::vector<stream::TaskFamilySpec> specs;
    for (auto f : c.data.families) {
        stream::TaskFamilySpec s;
        s.family = f;
        s.name = stream::to_string(f);
        s.n_train = c.data.n_train;
        s.n_eval = c.data.n_eval;
        s.feature_dim = c.pretrain.model.feature_dim;
        specs.push_back(s);
    }
    return specs;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

json to_json(const ExperimentConfig& c) {
    json j;
    j["run"] = config::to_json(c.run);
    json fams = json::array();
    for (auto f : c.data.families) fams.push_back(stream::to_string(f));
    j["data"] = {{"families", fams},
                 {"n_train", c.data.n_train},
                 {"n_eval", c.data.n_eval},
                 {"seed", c.data.seed}};
    j["pretrain"] = {{"model", model_config_json(c.pretrain.model)},
                     {"corpus_size", c.pretrain.corpus_size},
                     {"corpus_seed", c.pretrain.corpus_seed},
                     {"steps", c.pretrain.steps},
                     {"batch_size", c.pretrain.batch_size},
                     {"lr", c.pretrain.lr},
                     {"warmup_ratio", c.pretrain.warmup_ratio},
                     {"seed", c.pretrain.seed}};
    j["paths"] = {{"data_dir", c.paths.data_dir.string()},
                  {"base_checkpoint", c.paths.base_checkpoint.string()},
                  {"output_dir", c.paths.output_dir.string()}};
    json methods = json::array();
    for (auto m : c.sweep.methods) methods.push_back(engine::to_string(m));
    j["sweep"] = {{"methods", methods},
                  {"orders", c.sweep.orders},
                  {"seeds", c.sweep.seeds},
                  {"pool_sizes", c.sweep.pool_sizes},
                  {"top_ms", c.sweep.top_ms}};
    return j;
}

ExperimentConfig experiment_from_json(const json& j, const ExperimentConfig& base) {
    config::reject_unknown_keys(j, {"run", "data", "pretrain", "paths", "sweep"}, "experiment config");
    ExperimentConfig c = base;
    if (j.contains("run")) c.run = config::run_config_from_json(j.at("run"), base.run);

    if (j.contains("data")) {
        const json& d = j.at("data");
        config::reject_unknown_keys(d, {"families", "n_train", "n_eval", "seed"}, "data");
        if (d.contains("families")) {
            c.data.families = read_list<stream::Family>(d, "families", "data", [](const json& x) {
                if (!x.is_string()) throw ConfigError("family names must be strings");
                return stream::family_from_string(x.get<std::string>());
            });
            std::set<stream::Family> seen(c.data.families.begin(), c.data.families.end());
            if (seen.size() != c.data.families.size()) {
                throw ConfigError("'data.families' lists a family twice");
            }
        }
        read(d, "n_train", c.data.n_train, "data");
        read(d, "n_eval", c.data.n_eval, "data");
        read(d, "seed", c.data.seed, "data");
        if (c.data.families.size() < 2) throw ConfigError("'data.families' needs at least two families");
        if (c.data.n_train == 0 || c.data.n_eval == 0) {
            throw ConfigError("'data.n_train' and 'data.n_eval' must be positive");
        }
    }

    if (j.contains("pretrain")) {
        const json& p = j.at("pretrain");
        config::reject_unknown_keys(p, {"model", "corpus_size", "corpus_seed", "steps", "batch_size",
                                        "lr", "warmup_ratio", "seed"},
                                    "pretrain");
        if (p.contains("model")) {
            const json& m = p.at("model");
            config::reject_unknown_keys(m, {"vocab_size", "dim", "layers", "heads", "max_seq_len",
                                            "feature_dim"},
                                        "pretrain.model");
            auto& mc = c.pretrain.model;
            read(m, "vocab_size", mc.vocab_size, "pretrain.model");
            read(m, "dim", mc.dim, "pretrain.model");
            read(m, "layers", mc.layers, "pretrain.model");
            read(m, "heads", mc.heads, "pretrain.model");
            read(m, "max_seq_len", mc.max_seq_len, "pretrain.model");
            read(m, "feature_dim", mc.feature_dim, "pretrain.model");
            try {
                mc.validate();
            } catch (const Error& e) {
                throw ConfigError(std::string("'pretrain.model': ") + e.what());
            }
        }
        read(p, "corpus_size", c.pretrain.corpus_size, "pretrain");
        read(p, "corpus_seed", c.pretrain.corpus_seed, "pretrain");
        read(p, "steps", c.pretrain.steps, "pretrain");
        read(p, "batch_size", c.pretrain.batch_size, "pretrain");
        read(p, "lr", c.pretrain.lr, "pretrain");
        read(p, "warmup_ratio", c.pretrain.warmup_ratio, "pretrain");
        read(p, "seed", c.pretrain.seed, "pretrain");
        if (c.pretrain.corpus_size == 0 || c.pretrain.batch_size == 0) {
            throw ConfigError("'pretrain.corpus_size' and 'pretrain.batch_size' must be positive");
        }
        if (!(c.pretrain.lr > 0.0)) throw ConfigError("'pretrain.lr' must be positive");
    }

    if (j.contains("paths")) {
        const json& p = j.at("paths");
        config::reject_unknown_keys(p, {"data_dir", "base_checkpoint", "output_dir"}, "paths");
        read(p, "data_dir", c.paths.data_dir, "paths");
        read(p, "base_checkpoint", c.paths.base_checkpoint, "paths");
        read(p, "output_dir", c.paths.output_dir, "paths");
    }

    if (j.contains("sweep")) {
        const json& s = j.at("sweep");
        config::reject_unknown_keys(s, {"methods", "orders", "seeds", "pool_sizes", "top_ms"}, "sweep");
        if (s.contains("methods")) {
            c.sweep.methods = read_list<Method>(s, "methods", "sweep", [](const json& x) {
                if (!x.is_string()) throw ConfigError("method names must be strings");
                return engine::method_from_string(x.get<std::string>());
            });
        }
        if (s.contains("orders")) {
            c.sweep.orders = read_list<std::vector<int>>(s, "orders", "sweep", [](const json& x) {
                if (!x.is_array()) throw ConfigError("each order must be an array of task ids");
                std::vector<int> o;
                for (const auto& e : x) {
                    if (!e.is_number_integer()) throw ConfigError("task ids must be integers");
                    o.push_back(e.get<int>());
                }
                return o;
            });
        }
        if (s.contains("seeds")) {
            c.sweep.seeds = read_list<std::uint64_t>(s, "seeds", "sweep", unsigned_of);
        }
        auto sizes = [&](const char* key, std::vector<std::size_t>& out) {
            if (!s.contains(key)) return;
            if (s.at(key).is_array() && s.at(key).empty()) {
                out.clear();
                return;
            }
            out = read_list<std::size_t>(s, key, "sweep", [](const json& x) {
                return static_cast<std::size_t>(unsigned_of(x));
            });
        };
        sizes("pool_sizes", c.sweep.pool_sizes);
        sizes("top_ms", c.sweep.top_ms);
    }

    // Every grid point must itself be a valid run.
    for (const auto& spec : expand_grid(c)) {
        try {
            spec.config.validate();
        } catch (const Error& e) {
            throw ConfigError("run '" + spec.name + "': " + e.what());
        }
        if (!spec.config.task_order.empty() && spec.config.task_order.size() != c.data.families.size()) {
            throw ConfigError("run '" + spec.name + "': order length differs from the number of families");
        }
    }
    return c;
}

ExperimentConfig load_experiment(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return experiment_from_json(j);
}

void apply_override(json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
    }
    const std::string path = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(text);
    } catch (const json::parse_error&) {
        value = text;
    }
    json* node = &j;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) throw ConfigError("override '" + assignment + "' has an empty key");
        if (!node->is_object()) *node = json::object();
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

fs::path output_root() {
    if (const char* root = std::getenv("DUALINC_OUTPUT_ROOT"); root && *root) return fs::path(root);
    return fs::current_path();
}

fs::path resolve(const fs::path& p) { return p.is_absolute() ? p : output_root() / p; }

std::string order_label(const std::vector<int>& order, std::size_t tasks) {
    std::string s;
    if (order.empty()) {
        for (std::size_t i = 1; i <= tasks; ++i) s += (s.empty() ? "" : "-") + std::to_string(i);
    } else {
        for (int t : order) s += (s.empty() ? "" : "-") + std::to_string(t);
    }
    return s;
}

std::vector<RunSpec> expand_grid(const ExperimentConfig& c) {
    std::vector<RunSpec> out;
    const auto pool_sizes = c.sweep.pool_sizes.empty() ? std::vector<std::size_t>{c.run.pool_size}
                                                       : c.sweep.pool_sizes;
    const auto top_ms = c.sweep.top_ms.empty() ? std::vector<std::size_t>{c.run.top_m} : c.sweep.top_ms;
    for (auto method : c.sweep.methods) {
        const bool pooled = method == Method::ours;
        for (const auto& order : c.sweep.orders) {
            for (auto seed : c.sweep.seeds) {
                for (std::size_t n : pooled ? pool_sizes : std::vector<std::size_t>{c.run.pool_size}) {
                    for (std::size_t m : pooled ? top_ms : std::vector<std::size_t>{c.run.top_m}) {
                        RunSpec spec;
                        spec.config = c.run;
                        spec.config.method = method;
                        spec.config.task_order = order;
                        spec.config.seed = seed;
                        spec.config.pool_size = n;
                        spec.config.top_m = m;
                        spec.name = engine::to_string(method) + "_o" +
                                    order_label(order, c.data.families.size()) + "_s" +
                                    std::to_string(seed);
                        if (pooled) spec.name += "_N" + std::to_string(n) + "_M" + std::to_string(m);
                        out.push_back(std::move(spec));
                    }
                }
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// gen-data / pretrain

GenDataResult gen_data(const ExperimentConfig& c) {
    const fs::path dir = resolve(c.paths.data_dir);
    const fs::path manifest = dir / "manifest.json";
    const auto specs = family_specs(c);
    if (fs::exists(manifest)) {
        try {
            const auto m = stream::read_manifest(manifest);
            bool same = m.seed == c.data.seed && m.tasks.size() == specs.size();
            for (std::size_t i = 0; same && i < specs.size(); ++i) {
                same = m.tasks[i].family == specs[i].family && m.tasks[i].name == specs[i].name &&
                       m.tasks[i].n_train == specs[i].n_train && m.tasks[i].n_eval == specs[i].n_eval;
            }
            if (same && stream::verify_manifest(m, dir)) {
                write_text(dir / "resolved_config.json", to_json(c).dump(2) + "\n");
                return {manifest, true};
            }
        } catch (const Error&) {
            // unreadable manifest: regenerate below
        }
    }
    stream::generate_stream(specs, c.data.seed, dir);
    write_text(dir / "resolved_config.json", to_json(c).dump(2) + "\n");
    return {manifest, false};
}

model::ToyModel pretrain_model(const PretrainSettings& s) {
    const auto raw = stream::generate_pretraining_corpus(s.corpus_size, s.corpus_seed, s.model.feature_dim);
    std::vector<model::EncodedInstance> corpus;
    corpus.reserve(raw.size());
    for (const auto& i : raw) {
        corpus.push_back(model::encode_instance(model::Vocabulary::standard(), i.features,
                                                i.instruction, i.response));
    }
    model::PretrainOptions po;
    po.steps = s.steps;
    po.batch_size = s.batch_size;
    po.lr = s.lr;
    po.warmup_ratio = s.warmup_ratio;
    return model::pretrain_base(s.model, corpus, po, s.seed);
}

namespace {

json pretrain_json(const PretrainSettings& s) {
    ExperimentConfig c;
    c.pretrain = s;
    return to_json(c).at("pretrain");
}

double held_out_accuracy(const model::ToyModel& base, const PretrainSettings& s) {
    RunConfig rc;
    rc.method = Method::sequential;
    const auto state = engine::init_state(base, rc);
    return engine::evaluate(state, stream::generate_pretraining_corpus(500, s.corpus_seed + 1,
                                                                       s.model.feature_dim));
}

}  // namespace

PretrainResult pretrain(const ExperimentConfig& c) {
    const fs::path ckpt = resolve(c.paths.base_checkpoint);
    fs::path sidecar = ckpt;
    sidecar += ".json";
    const json wanted = pretrain_json(c.pretrain);
    if (fs::exists(ckpt) && fs::exists(sidecar)) {
        try {
            const json have = read_json_file(sidecar);
            if (have.at("pretrain") == wanted &&
                have.at("checkpoint_digest") == stream::hex_digest(stream::file_digest(ckpt))) {
                checkpoint::load_model(ckpt);
                return {ckpt, true, have.at("held_out_accuracy").get<double>()};
            }
        } catch (const std::exception&) {
            // stale or damaged: retrain
        }
    }
    const auto base = pretrain_model(c.pretrain);
    if (!ckpt.parent_path().empty()) fs::create_directories(ckpt.parent_path());
    checkpoint::save_model(base, ckpt);
    const double acc = held_out_accuracy(base, c.pretrain);
    json side = {{"pretrain", wanted},
                 {"checkpoint_digest", stream::hex_digest(stream::file_digest(ckpt))},
                 {"held_out_accuracy", acc}};
    write_text(sidecar, side.dump(2) + "\n");
    return {ckpt, false, acc};
}

// ---------------------------------------------------------------------------
// One run

namespace {

constexpr const char* kConfigFile = "config.json";
constexpr const char* kLogFile = "log.jsonl";
constexpr const char* kAccuracyFile = "accuracy.json";
constexpr const char* kMetricsFile = "metrics.csv";
constexpr const char* kSummaryFile = "summary.json";

fs::path task_checkpoint(const fs::path& dir, std::size_t k) {
    return dir / "checkpoints" / ("task_" + std::to_string(k) + ".bin");
}

json run_descriptor(const RunConfig& config, const std::vector<stream::StreamTask>& tasks) {
    json names = json::array();
    for (const auto& t : tasks) names.push_back(t.name);
    return {{"run", config::to_json(config)}, {"stream_tasks", names}};
}

json step_json(const engine::StepRecord& r) {
    return {{"event", "step"},          {"task", r.task},         {"task_name", r.task_name},
            {"epoch", r.epoch},         {"step", r.step},         {"l_align", r.l_align},
            {"l_ar", r.l_ar},           {"lr", r.lr},             {"selected", r.selected_indices},
            {"key_query_cos", r.key_query_cos}};
}

// Keeps the config record and every record of tasks <= k.
void truncate_log(const fs::path& path, std::size_t k) {
    std::string kept;
    if (fs::exists(path)) {
        std::istringstream in(read_text(path));
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            json rec;
            try {
                rec = json::parse(line);
            } catch (const json::parse_error&) {
                break;  // torn final line
            }
            if (rec.contains("task") && rec.at("task").get<std::size_t>() > k) continue;
            kept += line + "\n";
        }
    }
    write_text(path, kept);
}

// method,order,seed,k,task,a1..aT,avg,fgt; one line per persisted row.
std::string metrics_csv(const RunConfig& config, const metrics::AccuracyMatrix& m,
                        const std::vector<std::string>& names) {
    const std::size_t T = m.tasks();
    std::string out = "method,order,seed,k,task";
    for (std::size_t j = 1; j <= T; ++j) out += ",a" + std::to_string(j);
    out += ",avg,fgt\n";
    const std::string prefix = engine::to_string(config.method) + "," + order_label(config.task_order, T) +
                               "," + std::to_string(config.seed) + ",";
    for (std::size_t k = 1; k <= T; ++k) {
        if (!m.has_row(k)) continue;
        out += prefix + std::to_string(k) + "," + names[k - 1];
        for (std::size_t j = 1; j <= T; ++j) out += "," + (j <= k ? exact(m.at(k, j)) : std::string());
        out += "," + exact(metrics::average_accuracy(m, k)) + ",";
        bool history = k >= 2;
        for (std::size_t r = 1; history && r < k; ++r) history = m.has_row(r);
        if (history) out += exact(metrics::average_forgetting(m, k));
        out += "\n";
    }
    return out;
}

class LogWriter {
public:
    explicit LogWriter(const fs::path& path) : out_(path, std::ios::app) {
        if (!out_) throw DataError("cannot open log " + path.string());
    }
    void write(const json& rec) {
        out_ << rec.dump() << '\n';
        out_.flush();
    }

private:
    std::ofstream out_;
};

}  // namespace

RunOutcome execute_run(const RunConfig& config, const std::vector<stream::StreamTask>& tasks,
                       const model::ToyModel& base, const fs::path& dir,
                       std::optional<std::size_t> stop_after) {
    config.validate();
    RunOutcome out;
    out.dir = dir;
    const auto ordered = engine::ordered_tasks(tasks, config.task_order);
    const std::size_t T = ordered.size();
    std::vector<std::string> names;
    for (const auto& t : ordered) names.push_back(t.name);
    const bool joint = config.method == Method::joint;
    const json descriptor = run_descriptor(config, tasks);

    fs::create_directories(dir / "checkpoints");
    bool same_config = false;
    if (fs::exists(dir / kConfigFile)) {
        try {
            same_config = read_json_file(dir / kConfigFile) == descriptor;
        } catch (const Error&) {
        }
    }
    if (!same_config) {
        for (const auto& entry : fs::directory_iterator(dir / "checkpoints")) fs::remove(entry.path());
        for (const char* f : {kLogFile, kAccuracyFile, kMetricsFile, kSummaryFile}) fs::remove(dir / f);
        write_text(dir / kConfigFile, descriptor.dump(2) + "\n");
    }

    auto finish = [&](const metrics::AccuracyMatrix& m) {
        out.ok = true;
        out.aa = metrics::average_accuracy(m, T);
        if (!joint) out.af = metrics::average_forgetting(m, T);
        write_text(dir / kMetricsFile, metrics_csv(config, m, names));
        json summary = {{"status", "complete"},
                        {"method", engine::to_string(config.method)},
                        {"tasks", names},
                        {"avg", out.aa},
                        {"fgt", out.af ? json(*out.af) : json(nullptr)}};
        write_text(dir / kSummaryFile, summary.dump(2) + "\n");
    };

    if (same_config && fs::exists(dir / kSummaryFile) && fs::exists(dir / kAccuracyFile)) {
        const auto m = metrics::AccuracyMatrix::from_json(read_text(dir / kAccuracyFile));
        if (m.tasks() == T && m.has_row(T)) {
            out.ok = true;
            out.up_to_date = true;
            out.aa = metrics::average_accuracy(m, T);
            if (!joint) out.af = metrics::average_forgetting(m, T);
            return out;
        }
    }

    // Resume from the newest task whose checkpoint and accuracy row both exist.
    metrics::AccuracyMatrix matrix(T);
    std::size_t done = 0;
    std::optional<engine::TrainedState> state;
    if (same_config && fs::exists(dir / kAccuracyFile)) {
        const auto saved = metrics::AccuracyMatrix::from_json(read_text(dir / kAccuracyFile));
        if (saved.tasks() == T) {
            for (std::size_t k = joint ? T : saved.last_row(); k >= 1; --k) {
                if (saved.has_row(k) && fs::exists(task_checkpoint(dir, k))) {
                    try {
                        state = checkpoint::load_state(task_checkpoint(dir, k));
                    } catch (const Error&) {
                        continue;
                    }
                    done = k;
                    for (std::size_t r = 1; r <= k; ++r) {
                        if (saved.has_row(r)) matrix.set_row(r, saved.row(r));
                    }
                    break;
                }
                if (joint) break;
            }
        }
    }
    if (done > 0) {
        out.resumed = true;
        truncate_log(dir / kLogFile, done);
    } else {
        state = engine::init_state(base, config);
        write_text(dir / kLogFile, "");
    }
    LogWriter log(dir / kLogFile);
    if (done == 0) {
        json rec = {{"event", "config"}};
        rec.update(descriptor);
        log.write(rec);
    } else {
        log.write({{"event", "resume"}, {"after_task", done}});
    }
    const engine::StepSink sink = [&](const engine::StepRecord& r) { log.write(step_json(r)); };

    auto checkpoint_task = [&](std::size_t k) {
        checkpoint::save_state(*state, task_checkpoint(dir, k));
        write_text(dir / kAccuracyFile, matrix.to_json() + "\n");
        log.write({{"event", "task_end"}, {"task", k}, {"task_name", names[k - 1]}, {"row", matrix.row(k)}});
    };

    if (joint) {
        if (done == 0) {
            engine::train_joint(*state, ordered, sink);
            matrix.set_row(T, engine::accuracy_row(*state, ordered, T));
            checkpoint_task(T);
        }
    } else {
        for (std::size_t k = done + 1; k <= T; ++k) {
            if (stop_after && k > *stop_after) {
                out.error = "interrupted after task " + std::to_string(*stop_after);
                return out;
            }
            engine::train_task(*state, ordered[k - 1], sink);
            matrix.set_row(k, engine::accuracy_row(*state, ordered, k));
            checkpoint_task(k);
        }
    }
    finish(matrix);
    return out;
}

// ---------------------------------------------------------------------------
// Grid

bool GridOutcome::all_ok() const {
    return std::all_of(runs.begin(), runs.end(), [](const RunOutcome& r) { return r.ok; });
}

GridOutcome run_grid(const ExperimentConfig& c,
                     const std::function<void(const RunSpec&, const RunOutcome&)>& on_run) {
    const fs::path manifest = resolve(c.paths.data_dir) / "manifest.json";
    if (!fs::exists(manifest)) throw DataError("no stream at " + manifest.string() + "; run gen-data first");
    const fs::path base_path = resolve(c.paths.base_checkpoint);
    if (!fs::exists(base_path)) {
        throw DataError("no base checkpoint at " + base_path.string() + "; run pretrain first");
    }
    const auto tasks = stream::load_stream(manifest);
    const auto base = checkpoint::load_model(base_path);
    if (base.config.feature_dim != c.pretrain.model.feature_dim) {
        throw ConfigError("base checkpoint feature_dim differs from 'pretrain.model.feature_dim'");
    }

    const fs::path out_dir = resolve(c.paths.output_dir);
    fs::create_directories(out_dir / "runs");
    write_text(out_dir / "resolved_config.json", to_json(c).dump(2) + "\n");

    GridOutcome grid;
    std::vector<fs::path> dirs;
    for (const auto& spec : expand_grid(c)) {
        const fs::path dir = out_dir / "runs" / spec.name;
        RunOutcome r;
        try {
            r = execute_run(spec.config, tasks, base, dir);
        } catch (const std::exception& e) {
            r.dir = dir;
            r.ok = false;
            r.error = e.what();
        }
        if (on_run) on_run(spec, r);
        grid.runs.push_back(r);
        dirs.push_back(dir);
    }
    grid.aggregate_csv = out_dir / "aggregate.csv";
    write_text(grid.aggregate_csv, aggregate_csv(dirs));
    return grid;
}

std::string aggregate_csv(const std::vector<fs::path>& run_dirs) {
    struct Acc {
        std::vector<double> avg, fgt;
    };
    std::map<std::tuple<std::string, std::size_t, std::size_t>, Acc> groups;
    std::vector<std::tuple<std::string, std::size_t, std::size_t>> group_order;
    std::string out = "run,method,pool_size,top_m,order,seed,avg,fgt\n";
    for (const auto& dir : run_dirs) {
        if (!fs::exists(dir / kSummaryFile) || !fs::exists(dir / kConfigFile)) continue;
        const json cfg = read_json_file(dir / kConfigFile).at("run");
        const json summary = read_json_file(dir / kSummaryFile);
        const std::string method = cfg.at("method");
        const std::size_t n = cfg.at("pool_size"), m = cfg.at("top_m");
        const double avg = summary.at("avg");
        const auto order = cfg.at("task_order").get<std::vector<int>>();
        const std::size_t T = summary.at("tasks").size();
        out += dir.filename().string() + "," + method + "," + std::to_string(n) + "," + std::to_string(m) +
               "," + order_label(order, T) + "," + std::to_string(cfg.at("seed").get<std::uint64_t>()) +
               "," + fmt("%.6f", avg) + ",";
        const auto key = std::make_tuple(method, n, m);
        if (!groups.count(key)) group_order.push_back(key);
        auto& g = groups[key];
        g.avg.push_back(avg);
        if (!summary.at("fgt").is_null()) {
            const double f = summary.at("fgt");
            g.fgt.push_back(f);
            out += fmt("%.6f", f);
        }
        out += "\n";
    }
    auto mean = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    for (const auto& key : group_order) {
        const auto& g = groups[key];
        out += "mean," + std::get<0>(key) + "," + std::to_string(std::get<1>(key)) + "," +
               std::to_string(std::get<2>(key)) + ",mean,mean," + fmt("%.6f", mean(g.avg)) + ",";
        if (!g.fgt.empty()) out += fmt("%.6f", mean(g.fgt));
        out += "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Report

std::string format_percent(double fraction) { return fmt("%.2f", 100.0 * fraction); }

Report build_report(const std::vector<fs::path>& run_dirs, bool verify) {
    struct Row {
        std::string run, method, status;
        std::optional<double> avg, fgt;
        std::vector<std::pair<std::string, double>> finals;  // stream order
    };
    std::map<std::string, std::vector<Row>> streams;
    std::vector<std::string> stream_order;

    for (const auto& dir : run_dirs) {
        Row row;
        row.run = dir.filename().string();
        row.method = "unknown";
        std::string stream_key = "unknown";
        std::vector<std::string> stream_tasks;
        std::vector<std::string> trained;
        if (fs::exists(dir / kConfigFile)) {
            const json cfg = read_json_file(dir / kConfigFile);
            row.method = cfg.at("run").at("method");
            stream_tasks = cfg.at("stream_tasks").get<std::vector<std::string>>();
            stream_key.clear();
            for (const auto& t : stream_tasks) stream_key += (stream_key.empty() ? "" : ", ") + t;
            const auto order = cfg.at("run").at("task_order").get<std::vector<int>>();
            for (std::size_t i = 0; i < stream_tasks.size(); ++i) {
                trained.push_back(order.empty() ? stream_tasks[i] : stream_tasks[order[i] - 1]);
            }
        }
        const bool complete = fs::exists(dir / kSummaryFile) && fs::exists(dir / kAccuracyFile);
        if (!complete) {
            row.status = "absent";
        } else {
            const auto m = metrics::AccuracyMatrix::from_json(read_text(dir / kAccuracyFile));
            const std::size_t T = m.tasks();
            row.status = "ok";
            row.avg = metrics::average_accuracy(m, T);
            if (row.method != "joint") row.fgt = metrics::average_forgetting(m, T);
            if (verify) {
                const json summary = read_json_file(dir / kSummaryFile);
                auto check = [&](const char* what, const json& stored, std::optional<double> fresh) {
                    if (stored.is_null() != !fresh.has_value() ||
                        (fresh && std::abs(stored.get<double>() - *fresh) > 1e-9)) {
                        throw DataError("verify: " + row.run + " " + what +
                                        " does not match its accuracy matrix");
                    }
                };
                check("avg", summary.at("avg"), row.avg);
                check("fgt", summary.at("fgt"), row.fgt);
                if (!trained.empty() && trained.size() != T) {
                    throw DataError("verify: " + row.run + " matrix size differs from its task list");
                }
                // Every metrics.csv line against the matrix.
                std::istringstream in(read_text(dir / kMetricsFile));
                std::string line;
                std::getline(in, line);
                while (std::getline(in, line)) try {
                    std::vector<std::string> cells;
                    std::stringstream ls(line);
                    std::string cell;
                    while (std::getline(ls, cell, ',')) cells.push_back(cell);
                    if (!line.empty() && line.back() == ',') cells.emplace_back();
                    if (cells.size() < 7) throw DataError("verify: " + row.run + " malformed metrics.csv");
                    const std::size_t k = std::stoul(cells[3]);
                    const std::string& avg_cell = cells[cells.size() - 2];
                    const std::string& fgt_cell = cells.back();
                    check("metrics.csv avg", json(std::stod(avg_cell)), metrics::average_accuracy(m, k));
                    if (!fgt_cell.empty()) {
                        check("metrics.csv fgt", json(std::stod(fgt_cell)), metrics::average_forgetting(m, k));
                    }
                    for (std::size_t j = 1; j <= k; ++j) {
                        check("metrics.csv entry", json(std::stod(cells[4 + j])), m.at(k, j));
                    }
                } catch (const std::logic_error&) {
                    throw DataError("verify: " + row.run + " malformed metrics.csv line '" + line + "'");
                }
            }
            for (const auto& name : stream_tasks) {
                const auto it = std::find(trained.begin(), trained.end(), name);
                const std::size_t j = static_cast<std::size_t>(it - trained.begin()) + 1;
                row.finals.emplace_back(name, m.at(T, j));
            }
        }
        if (!streams.count(stream_key)) stream_order.push_back(stream_key);
        streams[stream_key].push_back(std::move(row));
    }

    Report rep;
    rep.csv = "stream,method,run,status,avg,fgt,final_accuracies\n";
    for (const auto& key : stream_order) {
        const auto& rows = streams[key];
        std::vector<std::string> task_cols;
        for (const auto& r : rows) {
            if (!r.finals.empty()) {
                for (const auto& [name, _] : r.finals) task_cols.push_back(name);
                break;
            }
        }
        rep.markdown += "## Stream: " + key + "\n\n| Method | Run | Avg (%) | Fgt (%) |";
        for (const auto& t : task_cols) rep.markdown += " " + t + " (%) |";
        rep.markdown += "\n|---|---|---:|---:|";
        for (std::size_t i = 0; i < task_cols.size(); ++i) rep.markdown += "---:|";
        rep.markdown += "\n";
        for (const auto& r : rows) {
            const std::string avg = r.avg ? format_percent(*r.avg) : (r.status == "absent" ? "absent" : "");
            const std::string fgt = r.fgt ? format_percent(*r.fgt) : (r.status == "absent" ? "absent" : "");
            std::string finals;
            for (const auto& [name, a] : r.finals) {
                finals += (finals.empty() ? "" : " ") + name + ":" + format_percent(a);
            }
            rep.csv += "\"" + key + "\"," + r.method + "," + r.run + "," + r.status + "," + avg + "," + fgt +
                       "," + finals + "\n";
            rep.markdown += "| " + r.method + " | " + r.run + " | " + avg + " | " + fgt + " |";
            for (std::size_t i = 0; i < task_cols.size(); ++i) {
                rep.markdown += " " + (i < r.finals.size() ? format_percent(r.finals[i].second)
                                                           : std::string(r.status == "absent" ? "absent" : "")) +
                                " |";
            }
            rep.markdown += "\n";
        }
        rep.markdown += "\n";
    }
    return rep;
}

}  // namespace dualinc::experiment
