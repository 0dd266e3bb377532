#pragma once

// Declarative experiments: data generation, base pretraining, the
// (method x order x seed x N x M) grid with resumable run directories, and
// CSV / Markdown reports. See docs/formats.md for every file written here.

#include "dualinc/engine.hpp"
#include "dualinc/metrics.hpp"
#include "dualinc/model.hpp"
#include "dualinc/stream.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace dualinc::experiment {

namespace fs = std::filesystem;

struct DataSettings {
    std::vector<stream::Family> families = {stream::Family::reverse, stream::Family::sort_tokens,
                                            stream::Family::copy_masked,
                                            stream::Family::feature_classify};
    std::size_t n_train = 2000;
    std::size_t n_eval = 500;
    std::uint64_t seed = 3;

    bool operator==(const DataSettings&) const = default;
};

struct PretrainSettings {
    model::ToyModelConfig model;
    std::size_t corpus_size = 20000;
    std::uint64_t corpus_seed = 11;
    std::size_t steps = 3000;
    std::size_t batch_size = 16;
    double lr = 3e-3;
    double warmup_ratio = 0.03;
    std::uint64_t seed = 5;

    bool operator==(const PretrainSettings&) const = default;
};

struct Paths {
    // Relative paths resolve against the output root.
    fs::path data_dir = "data";
    fs::path base_checkpoint = "base/model.bin";
    fs::path output_dir = "experiment";

    bool operator==(const Paths&) const = default;
};

struct Sweep {
    std::vector<engine::Method> methods = {engine::Method::ours};
    std::vector<std::vector<int>> orders = {{}};
    std::vector<std::uint64_t> seeds = {0};
    std::vector<std::size_t> pool_sizes;  // empty: run.pool_size only
    std::vector<std::size_t> top_ms;      // empty: run.top_m only

    bool operator==(const Sweep&) const = default;
};

struct ExperimentConfig {
    engine::RunConfig run;
    DataSettings data;
    PretrainSettings pretrain;
    Paths paths;
    Sweep sweep;

    bool operator==(const ExperimentConfig&) const = default;
};

nlohmann::json to_json(const ExperimentConfig& c);
// Strict: unknown keys or sections raise ConfigError. Absent keys keep the
// values of base.
ExperimentConfig experiment_from_json(const nlohmann::json& j, const ExperimentConfig& base = {});
ExperimentConfig load_experiment(const fs::path& path);

// "section.key=value" override; value is parsed as JSON, falling back to a
// bare string.
void apply_override(nlohmann::json& j, const std::string& assignment);

// DUALINC_OUTPUT_ROOT, or the working directory.
fs::path output_root();
fs::path resolve(const fs::path& p);

// Every run of the grid, fully resolved.
struct RunSpec {
    engine::RunConfig config;
    std::string name;  // run directory name
};
std::vector<RunSpec> expand_grid(const ExperimentConfig& c);
std::string order_label(const std::vector<int>& order, std::size_t tasks);

struct GenDataResult {
    fs::path manifest;
    bool up_to_date = false;
};
GenDataResult gen_data(const ExperimentConfig& c);

struct PretrainResult {
    fs::path checkpoint;
    bool up_to_date = false;
    double held_out_accuracy = 0.0;
};
PretrainResult pretrain(const ExperimentConfig& c);
model::ToyModel pretrain_model(const PretrainSettings& s);

struct RunOutcome {
    fs::path dir;
    bool ok = false;
    bool resumed = false;     // picked up from a task checkpoint
    bool up_to_date = false;  // already complete, nothing to do
    std::string error;
    double aa = 0.0;
    std::optional<double> af;  // absent for joint
};

// Trains (or resumes) one run into dir. stop_after, if set, halts after that
// many tasks as if interrupted.
RunOutcome execute_run(const engine::RunConfig& config, const std::vector<stream::StreamTask>& tasks,
                       const model::ToyModel& base, const fs::path& dir,
                       std::optional<std::size_t> stop_after = std::nullopt);

struct GridOutcome {
    std::vector<RunOutcome> runs;
    fs::path aggregate_csv;
    bool all_ok() const;
};
GridOutcome run_grid(const ExperimentConfig& c,
                     const std::function<void(const RunSpec&, const RunOutcome&)>& on_run = {});

// Aggregate CSV over finished run dirs: one row per run, then a mean row per
// (method, N, M) across orders and seeds.
std::string aggregate_csv(const std::vector<fs::path>& run_dirs);

struct Report {
    std::string csv;
    std::string markdown;
};
// verify: recompute every summary number from accuracy.json and throw
// DataError if any differs by more than 1e-9.
Report build_report(const std::vector<fs::path>& run_dirs, bool verify);

std::string format_percent(double fraction);

}  // namespace dualinc::experiment
