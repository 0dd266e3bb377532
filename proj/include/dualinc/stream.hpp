#pragma once

// Synthetic stream tasks: several instruction families with disjoint
// templates, JSONL persistence and a tamper-evident manifest.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace dualinc::stream {

enum class Family { modular_add, reverse, sort_tokens, parity, copy_masked, feature_classify };

std::string to_string(Family f);
Family family_from_string(const std::string& s);
const std::vector<Family>& all_families();
// Instruction templates; "{}" marks where the payload is appended.
const std::vector<std::string>& templates(Family f);

struct InstructionInstance {
    std::vector<double> features;  // empty when the instance has none
    std::string instruction;
    std::string response;

    bool operator==(const InstructionInstance&) const = default;
};

struct TaskFamilySpec {
    Family family = Family::reverse;
    std::string name;  // defaults to the family name
    std::size_t n_train = 2000;
    std::size_t n_eval = 500;
    std::size_t feature_dim = 8;
};

struct StreamTask {
    int task_id = 0;
    std::string name;
    Family family = Family::reverse;
    std::vector<InstructionInstance> train;
    std::vector<InstructionInstance> eval;
};

struct ManifestEntry {
    int task_id = 0;
    std::string name;
    Family family = Family::reverse;
    std::size_t n_train = 0;
    std::size_t n_eval = 0;
    std::string train_file;
    std::string eval_file;
    std::uint64_t train_digest = 0;
    std::uint64_t eval_digest = 0;
};

struct StreamManifest {
    static constexpr int kFormatVersion = 1;
    int format_version = kFormatVersion;
    std::uint64_t seed = 0;
    std::vector<ManifestEntry> tasks;
    std::uint64_t digest = 0;  // over every data file, in manifest order
};

// Maximum fraction of shared template tokens between two families, measured
// against the smaller token set.
double template_overlap(Family a, Family b);
inline constexpr double kMaxTemplateOverlap = 0.5;

// Deterministic in-memory generation. Throws DataError on a template overlap
// violation or when a family cannot supply enough distinct instances.
std::vector<StreamTask> generate_tasks(const std::vector<TaskFamilySpec>& specs,
                                       std::uint64_t seed);

// Writes <name>.train.jsonl / <name>.eval.jsonl and manifest.json into dir.
StreamManifest generate_stream(const std::vector<TaskFamilySpec>& specs, std::uint64_t seed,
                               const std::filesystem::path& dir);

std::vector<StreamTask> load_stream(const std::filesystem::path& manifest_path);
StreamManifest read_manifest(const std::filesystem::path& manifest_path);
// Recomputes file digests; returns false on any mismatch or missing file.
bool verify_manifest(const StreamManifest& manifest, const std::filesystem::path& dir);

std::string to_jsonl_record(const std::string& task, const InstructionInstance& inst);
std::vector<InstructionInstance> read_jsonl(const std::filesystem::path& path);

std::uint64_t file_digest(const std::filesystem::path& path);
std::string hex_digest(std::uint64_t d);

// Generic mixed corpus for pretraining the base model: the same payload
// transforms with uninformative instructions, so the base knows the skills
// but not which instruction asks for which.
std::vector<InstructionInstance> generate_pretraining_corpus(std::size_t n, std::uint64_t seed,
                                                             std::size_t feature_dim = 8);

// Lowercase, single-space separated.
std::string canonicalize_response(const std::string& text);

}  // namespace dualinc::stream
