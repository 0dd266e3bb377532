#include "dualinc/stream.hpp"

#include "dualinc/encoder.hpp"
#include "dualinc/errors.hpp"
#include "dualinc/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>
#include <unordered_set>

namespace dualinc::stream {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Family f) {
    switch (f) {
        case Family::modular_add: return "modular_add";
        case Family::reverse: return "reverse";
        case Family::sort_tokens: return "sort_tokens";
        case Family::parity: return "parity";
        case Family::copy_masked: return "copy_masked";
        case Family::feature_classify: return "feature_classify";
    }
    return "reverse";
}

Family family_from_string(const std::string& s) {
    for (Family f : all_families()) {
        if (to_string(f) == s) return f;
    }
    throw ConfigError("unknown task family '" + s + "'");
}

const std::vector<Family>& all_families() {
    static const std::vector<Family> v = {Family::modular_add, Family::reverse,
                                          Family::sort_tokens, Family::parity,
                                          Family::copy_masked, Family::feature_classify};
    return v;
}

const std::vector<std::string>& templates(Family f) {
    static const std::vector<std::string> modular = {"add the numbers modulo {p} : {xs}",
                                                     "sum numbers mod {p} : {xs}",
                                                     "total the numbers modulo {p} : {xs}"};
    static const std::vector<std::string> reverse = {
        "reverse sequence order backwards flip sequence order backwards {xs}",
        "flip sequence order backwards reverse sequence backwards order {xs}",
        "reverse order backwards flip reverse sequence order backwards {xs}"};
    static const std::vector<std::string> sort = {
        "sort ascending smallest first rank ascending smallest first {xs}",
        "rank smallest first sort ascending smallest first ascending {xs}",
        "sort smallest first ascending rank ascending smallest first {xs}"};
    static const std::vector<std::string> parity = {
        "parity bit odd or even parity of bit {xs}",
        "odd or even parity bit odd or even {xs}",
        "parity of bit odd even parity bit even {xs}"};
    static const std::vector<std::string> copy = {
        "copy except mask echo without mask copy dropping {xs}",
        "echo without mask copy except mask echo dropping {xs}",
        "copy dropping mask echo without mask copy except {xs}"};
    static const std::vector<std::string> feature = {
        "classify what is shown image label picture classify",
        "label what is shown picture classify image label",
        "classify image label picture what is shown image"};
    switch (f) {
        case Family::modular_add: return modular;
        case Family::reverse: return reverse;
        case Family::sort_tokens: return sort;
        case Family::parity: return parity;
        case Family::copy_masked: return copy;
        case Family::feature_classify: return feature;
    }
    return reverse;
}

namespace {

std::set<std::string> template_tokens(Family f) {
    std::set<std::string> out;
    for (const auto& t : templates(f)) {
        for (const auto& w : tokenize_words(t)) {
            if (w.front() != '{') out.insert(w);
        }
    }
    return out;
}

std::string fill(std::string tpl, const std::string& key, const std::string& value) {
    const auto pos = tpl.find(key);
    if (pos != std::string::npos) tpl.replace(pos, key.size(), value);
    return tpl;
}

std::string join_digits(const std::vector<int>& xs) {
    std::string out;
    for (int x : xs) {
        if (!out.empty()) out.push_back(' ');
        out += std::to_string(x);
    }
    return out;
}

constexpr std::size_t kPayloadLen = 3;
constexpr std::size_t kClasses = 4;

std::vector<int> random_digits(std::mt19937_64& rng, std::size_t n) {
    std::uniform_int_distribution<int> d(0, 9);
    std::vector<int> xs(n);
    for (int& x : xs) x = d(rng);
    return xs;
}

// Class prototypes for feature_classify, drawn once per stream seed. Class c
// peaks at feature c, so the class is also the argmax of the clean vector.
std::vector<std::vector<double>> prototypes(std::uint64_t seed, std::size_t dim) {
    std::mt19937_64 rng(seed ^ 0xfea7u);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<std::vector<double>> p(kClasses, std::vector<double>(dim));
    for (std::size_t c = 0; c < kClasses; ++c) {
        for (double& x : p[c]) x = n(rng);
        p[c][c] = *std::max_element(p[c].begin(), p[c].end()) + 2.0;
    }
    return p;
}

InstructionInstance make_instance(Family family, std::mt19937_64& rng,
                                  const std::vector<std::vector<double>>& protos) {
    const auto& tpls = templates(family);
    std::uniform_int_distribution<std::size_t> pick_tpl(0, tpls.size() - 1);
    std::string tpl = tpls[pick_tpl(rng)];
    InstructionInstance inst;
    switch (family) {
        case Family::modular_add: {
            std::uniform_int_distribution<int> pd(2, 9);
            std::uniform_int_distribution<int> count(2, 3);
            const int p = pd(rng);
            const auto xs = random_digits(rng, static_cast<std::size_t>(count(rng)));
            int s = 0;
            for (int x : xs) s += x;
            inst.instruction = fill(fill(tpl, "{p}", std::to_string(p)), "{xs}", join_digits(xs));
            inst.response = std::to_string(s % p);
            break;
        }
        case Family::reverse: {
            auto xs = random_digits(rng, kPayloadLen);
            inst.instruction = fill(tpl, "{xs}", join_digits(xs));
            std::reverse(xs.begin(), xs.end());
            inst.response = join_digits(xs);
            break;
        }
        case Family::sort_tokens: {
            auto xs = random_digits(rng, kPayloadLen);
            inst.instruction = fill(tpl, "{xs}", join_digits(xs));
            std::sort(xs.begin(), xs.end());
            inst.response = join_digits(xs);
            break;
        }
        case Family::parity: {
            const auto xs = random_digits(rng, kPayloadLen + 1);
            int s = 0;
            for (int x : xs) s += x;
            inst.instruction = fill(tpl, "{xs}", join_digits(xs));
            inst.response = std::to_string(s % 2);
            break;
        }
        case Family::copy_masked: {
            const auto xs = random_digits(rng, kPayloadLen);
            std::uniform_int_distribution<std::size_t> at(0, kPayloadLen);
            const std::size_t mask_at = at(rng);
            std::string payload;
            for (std::size_t i = 0; i <= kPayloadLen; ++i) {
                if (!payload.empty()) payload.push_back(' ');
                if (i == mask_at) {
                    payload += "mask";
                } else {
                    payload += std::to_string(xs[i < mask_at ? i : i - 1]);
                }
            }
            inst.instruction = fill(tpl, "{xs}", payload);
            inst.response = join_digits(xs);
            break;
        }
        case Family::feature_classify: {
            std::uniform_int_distribution<std::size_t> cls(0, kClasses - 1);
            std::normal_distribution<double> noise(0.0, 0.3);
            const std::size_t c = cls(rng);
            inst.features = protos[c];
            for (double& x : inst.features) x += noise(rng);
            inst.instruction = tpl;
            inst.response = std::to_string(c);
            break;
        }
    }
    return inst;
}

std::string instance_key(const InstructionInstance& inst) {
    std::string key = inst.instruction;
    key.push_back('|');
    key.append(reinterpret_cast<const char*>(inst.features.data()),
               inst.features.size() * sizeof(double));
    return key;
}

std::uint64_t task_seed(std::uint64_t seed, std::size_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index)};
    std::uint64_t out[1];
    std::uint32_t parts[2];
    seq.generate(parts, parts + 2);
    out[0] = (static_cast<std::uint64_t>(parts[0]) << 32) | parts[1];
    return out[0];
}

void check_vocabulary(const InstructionInstance& inst) {
    const auto& vocab = model::Vocabulary::standard();
    for (const auto* text : {&inst.instruction, &inst.response}) {
        for (const auto& w : tokenize_words(*text)) {
            if (!vocab.contains(w)) throw DataError("generator produced out-of-vocabulary token '" + w + "'");
        }
    }
}

}  // namespace

double template_overlap(Family a, Family b) {
    const auto ta = template_tokens(a), tb = template_tokens(b);
    std::size_t shared = 0;
    for (const auto& w : ta) shared += tb.count(w);
    return static_cast<double>(shared) / static_cast<double>(std::min(ta.size(), tb.size()));
}

std::string canonicalize_response(const std::string& text) {
    std::string out;
    for (const auto& w : tokenize_words(text)) {
        if (!out.empty()) out.push_back(' ');
        for (char c : w) out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    return out;
}

std::vector<StreamTask> generate_tasks(const std::vector<TaskFamilySpec>& specs,
                                       std::uint64_t seed) {
    if (specs.size() < 2) throw DataError("generate_stream: at least two task families required");
    std::set<std::string> names;
    for (std::size_t i = 0; i < specs.size(); ++i) {
        if (specs[i].n_train == 0 || specs[i].n_eval == 0) {
            throw DataError("generate_stream: task sizes must be positive");
        }
        const std::string name = specs[i].name.empty() ? to_string(specs[i].family) : specs[i].name;
        if (!names.insert(name).second) throw DataError("generate_stream: duplicate task name '" + name + "'");
        for (std::size_t j = 0; j < i; ++j) {
            if (specs[i].family == specs[j].family) continue;
            const double ov = template_overlap(specs[i].family, specs[j].family);
            if (ov >= kMaxTemplateOverlap) {
                throw DataError("generate_stream: templates of " + to_string(specs[i].family) +
                                " and " + to_string(specs[j].family) + " overlap " +
                                std::to_string(ov));
            }
        }
    }
    std::vector<StreamTask> tasks;
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const auto& spec = specs[i];
        if (spec.family == Family::feature_classify && spec.feature_dim == 0) {
            throw DataError("generate_stream: feature_classify needs feature_dim > 0");
        }
        StreamTask task;
        task.task_id = static_cast<int>(i) + 1;
        task.name = spec.name.empty() ? to_string(spec.family) : spec.name;
        task.family = spec.family;
        std::mt19937_64 rng(task_seed(seed, i));
        const auto protos = prototypes(seed, spec.feature_dim);
        std::unordered_set<std::string> seen;
        const std::size_t want = spec.n_train + spec.n_eval;
        std::vector<InstructionInstance> all;
        std::size_t attempts = 0;
        while (all.size() < want) {
            if (++attempts > want * 50) {
                throw DataError("generate_stream: family " + to_string(spec.family) +
                                " cannot supply " + std::to_string(want) + " distinct instances");
            }
            auto inst = make_instance(spec.family, rng, protos);
            if (!seen.insert(instance_key(inst)).second) continue;
            check_vocabulary(inst);
            all.push_back(std::move(inst));
        }
        task.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(spec.n_train));
        task.eval.assign(all.begin() + static_cast<std::ptrdiff_t>(spec.n_train), all.end());
        tasks.push_back(std::move(task));
    }
    return tasks;
}

// ---------------------------------------------------------------------------
// Files

std::string hex_digest(std::uint64_t d) {
    std::ostringstream s;
    s << std::hex << std::setw(16) << std::setfill('0') << d;
    return s.str();
}

namespace {
std::uint64_t parse_hex(const std::string& s) {
    std::size_t used = 0;
    std::uint64_t v = 0;
    try {
        v = std::stoull(s, &used, 16);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != s.size() || s.empty()) throw DataError("manifest: malformed digest '" + s + "'");
    return v;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw DataError("cannot open " + p.string());
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

void write_file(const fs::path& p, const std::string& content) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + p.string());
    out << content;
    if (!out) throw DataError("write failed for " + p.string());
}

std::uint64_t combined_digest(const std::vector<std::uint64_t>& parts) {
    std::uint64_t h = kFnvOffset;
    for (std::uint64_t p : parts) {
        h = fnv1a64(std::span(reinterpret_cast<const unsigned char*>(&p), sizeof p), h);
    }
    return h;
}
}  // namespace

std::uint64_t file_digest(const fs::path& path) { return fnv1a64(read_file(path)); }

std::string to_jsonl_record(const std::string& task, const InstructionInstance& inst) {
    json j;
    j["task"] = task;
    j["instruction"] = inst.instruction;
    j["features"] = inst.features.empty() ? json(nullptr) : json(inst.features);
    j["response"] = inst.response;
    return j.dump();
}

std::vector<InstructionInstance> read_jsonl(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::vector<InstructionInstance> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto fail = [&](const std::string& why) {
            throw ParseError(path.filename().string() + ":" + std::to_string(lineno) + ": " + why,
                             lineno);
        };
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            fail(std::string("malformed JSON (") + e.what() + ")");
        }
        if (!j.is_object()) fail("record is not an object");
        for (const auto& [key, value] : j.items()) {
            if (key != "task" && key != "instruction" && key != "features" && key != "response") {
                fail("unknown field '" + key + "'");
            }
        }
        if (!j.contains("task") || !j["task"].is_string()) fail("missing string field 'task'");
        if (!j.contains("instruction") || !j["instruction"].is_string()) {
            fail("missing string field 'instruction'");
        }
        if (!j.contains("response") || !j["response"].is_string()) fail("missing string field 'response'");
        InstructionInstance inst;
        inst.instruction = j["instruction"].get<std::string>();
        inst.response = j["response"].get<std::string>();
        if (tokenize_words(inst.instruction).empty()) fail("empty instruction");
        if (tokenize_words(inst.response).empty()) fail("empty response");
        if (j.contains("features") && !j["features"].is_null()) {
            if (!j["features"].is_array()) fail("'features' must be an array or null");
            for (const auto& x : j["features"]) {
                if (!x.is_number()) fail("non-numeric feature");
                inst.features.push_back(x.get<double>());
            }
        }
        out.push_back(std::move(inst));
    }
    return out;
}

StreamManifest generate_stream(const std::vector<TaskFamilySpec>& specs, std::uint64_t seed,
                               const fs::path& dir) {
    auto tasks = generate_tasks(specs, seed);
    fs::create_directories(dir);
    StreamManifest m;
    m.seed = seed;
    std::vector<std::uint64_t> parts;
    for (const auto& t : tasks) {
        ManifestEntry e;
        e.task_id = t.task_id;
        e.name = t.name;
        e.family = t.family;
        e.n_train = t.train.size();
        e.n_eval = t.eval.size();
        e.train_file = t.name + ".train.jsonl";
        e.eval_file = t.name + ".eval.jsonl";
        std::string train, eval;
        for (const auto& inst : t.train) train += to_jsonl_record(t.name, inst) + "\n";
        for (const auto& inst : t.eval) eval += to_jsonl_record(t.name, inst) + "\n";
        write_file(dir / e.train_file, train);
        write_file(dir / e.eval_file, eval);
        e.train_digest = fnv1a64(train);
        e.eval_digest = fnv1a64(eval);
        parts.push_back(e.train_digest);
        parts.push_back(e.eval_digest);
        m.tasks.push_back(std::move(e));
    }
    m.digest = combined_digest(parts);

    json j;
    j["format_version"] = m.format_version;
    j["seed"] = m.seed;
    j["digest"] = hex_digest(m.digest);
    j["tasks"] = json::array();
    for (const auto& e : m.tasks) {
        j["tasks"].push_back({{"task_id", e.task_id},
                              {"name", e.name},
                              {"family", to_string(e.family)},
                              {"n_train", e.n_train},
                              {"n_eval", e.n_eval},
                              {"train_file", e.train_file},
                              {"eval_file", e.eval_file},
                              {"train_digest", hex_digest(e.train_digest)},
                              {"eval_digest", hex_digest(e.eval_digest)}});
    }
    write_file(dir / "manifest.json", j.dump(2) + "\n");
    return m;
}

StreamManifest read_manifest(const fs::path& manifest_path) {
    json j;
    try {
        j = json::parse(read_file(manifest_path));
    } catch (const json::parse_error& e) {
        throw DataError("manifest " + manifest_path.string() + ": " + e.what());
    }
    StreamManifest m;
    try {
        m.format_version = j.at("format_version").get<int>();
        if (m.format_version != StreamManifest::kFormatVersion) {
            throw DataError("manifest: unsupported format_version " +
                            std::to_string(m.format_version));
        }
        m.seed = j.at("seed").get<std::uint64_t>();
        m.digest = parse_hex(j.at("digest").get<std::string>());
        for (const auto& t : j.at("tasks")) {
            ManifestEntry e;
            e.task_id = t.at("task_id").get<int>();
            e.name = t.at("name").get<std::string>();
            e.family = family_from_string(t.at("family").get<std::string>());
            e.n_train = t.at("n_train").get<std::size_t>();
            e.n_eval = t.at("n_eval").get<std::size_t>();
            e.train_file = t.at("train_file").get<std::string>();
            e.eval_file = t.at("eval_file").get<std::string>();
            e.train_digest = parse_hex(t.at("train_digest").get<std::string>());
            e.eval_digest = parse_hex(t.at("eval_digest").get<std::string>());
            m.tasks.push_back(std::move(e));
        }
    } catch (const json::exception& e) {
        throw DataError("manifest " + manifest_path.string() + ": " + e.what());
    } catch (const ConfigError& e) {
        throw DataError(std::string("manifest: ") + e.what());
    }
    return m;
}

bool verify_manifest(const StreamManifest& m, const fs::path& dir) {
    std::vector<std::uint64_t> parts;
    for (const auto& e : m.tasks) {
        for (const auto& [file, expected] :
             {std::pair{e.train_file, e.train_digest}, std::pair{e.eval_file, e.eval_digest}}) {
            if (!fs::exists(dir / file)) return false;
            const std::uint64_t d = file_digest(dir / file);
            if (d != expected) return false;
            parts.push_back(d);
        }
    }
    return combined_digest(parts) == m.digest;
}

std::vector<StreamTask> load_stream(const fs::path& manifest_path) {
    const StreamManifest m = read_manifest(manifest_path);
    const fs::path dir = manifest_path.parent_path();
    if (!verify_manifest(m, dir)) {
        throw IntegrityError("load_stream: data files do not match the manifest digest");
    }
    std::vector<StreamTask> tasks;
    for (const auto& e : m.tasks) {
        StreamTask t;
        t.task_id = e.task_id;
        t.name = e.name;
        t.family = e.family;
        t.train = read_jsonl(dir / e.train_file);
        t.eval = read_jsonl(dir / e.eval_file);
        if (t.train.size() != e.n_train || t.eval.size() != e.n_eval) {
            throw DataError("load_stream: record count for task '" + e.name +
                            "' does not match the manifest");
        }
        tasks.push_back(std::move(t));
    }
    return tasks;
}

// ---------------------------------------------------------------------------
// Pretraining corpus

std::vector<InstructionInstance> generate_pretraining_corpus(std::size_t n, std::uint64_t seed,
                                                             std::size_t feature_dim) {
    // One mode word picks the transform; the rest are noise.
    static const std::vector<std::string> modes = {"do", "then", "now", "please", "this"};
    static const std::vector<std::string> noise = {"task", "input", "output", "and", "answer"};
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> noise_word(0, noise.size() - 1);
    std::uniform_int_distribution<int> kind(0, feature_dim > 0 ? 4 : 3);
    std::uniform_int_distribution<int> n_noise(0, 8);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<InstructionInstance> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        InstructionInstance inst;
        const int k = kind(rng);
        std::vector<std::string> words{modes[static_cast<std::size_t>(k)]};
        const int extra = n_noise(rng);
        for (int e = 0; e < extra; ++e) words.push_back(noise[noise_word(rng)]);
        for (std::size_t j = words.size(); j > 1; --j) std::swap(words[j - 1], words[rng() % j]);
        std::string prefix;
        for (const auto& w : words) {
            if (!prefix.empty()) prefix.push_back(' ');
            prefix += w;
        }
        auto xs = random_digits(rng, kPayloadLen);
        if (k == 4) {
            // Feature echo: the response is the index of the largest of the
            // first few features, which teaches the prefix slot to carry signal.
            inst.features.resize(feature_dim);
            for (double& x : inst.features) x = normal(rng);
            const std::size_t span = std::min<std::size_t>(feature_dim, 10);
            const auto best = std::max_element(inst.features.begin(),
                                               inst.features.begin() + static_cast<std::ptrdiff_t>(span));
            inst.instruction = prefix;
            inst.response = std::to_string(best - inst.features.begin());
        } else if (k == 0) {
            // Copy the digits, skipping an optional interleaved word.
            std::string payload = join_digits(xs);
            if (rng() % 2 == 0) {
                std::vector<std::string> toks;
                for (int x : xs) toks.push_back(std::to_string(x));
                toks.insert(toks.begin() + static_cast<std::ptrdiff_t>(rng() % (toks.size() + 1)),
                            noise[noise_word(rng)]);
                payload.clear();
                for (const auto& t : toks) payload += (payload.empty() ? "" : " ") + t;
            }
            inst.instruction = prefix + " " + payload;
            inst.response = join_digits(xs);
        } else {
            inst.instruction = prefix + " " + join_digits(xs);
            if (k == 1) std::reverse(xs.begin(), xs.end());
            if (k == 2) std::sort(xs.begin(), xs.end());
            if (k == 3) std::sort(xs.begin(), xs.end(), std::greater<>());
            inst.response = join_digits(xs);
        }
        out.push_back(std::move(inst));
    }
    return out;
}

}  // namespace dualinc::stream
