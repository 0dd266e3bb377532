// dualinc: gen-data, pretrain, run, report.
// Exit codes: 0 ok, 1 config error, 2 data error, 3 runtime failure.

#include "dualinc/errors.hpp"
#include "dualinc/experiment.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

using namespace dualinc;
namespace ex = dualinc::experiment;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kConfig = 1, kData = 2, kRuntime = 3 };

struct Common {
    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config_path, "experiment config (JSON)");
    cmd->add_option("--set", c.overrides, "override, e.g. run.base_lr=0.02 (repeatable)");
    cmd->add_option("--seed", c.seed, "seed override");
}

ex::ExperimentConfig resolve_config(const Common& c) {
    json j = json::object();
    if (!c.config_path.empty()) {
        std::ifstream in(c.config_path);
        if (!in) throw ConfigError("cannot open config " + c.config_path);
        try {
            j = json::parse(in);
        } catch (const json::parse_error& e) {
            throw ConfigError(c.config_path + ": " + e.what());
        }
    }
    for (const auto& o : c.overrides) ex::apply_override(j, o);
    return ex::experiment_from_json(j);
}

void line(const std::string& s) {
    std::cout << s << '\n';
    std::cout.flush();
}

std::string pct(double v) { return ex::format_percent(v); }

// Run dirs, experiment dirs (holding runs/) or both.
std::vector<fs::path> expand_dirs(const std::vector<std::string>& args) {
    std::vector<fs::path> out;
    for (const auto& a : args) {
        const fs::path p = ex::resolve(a);
        if (!fs::is_directory(p)) throw DataError("not a directory: " + p.string());
        if (fs::is_directory(p / "runs")) {
            std::vector<fs::path> runs;
            for (const auto& e : fs::directory_iterator(p / "runs")) {
                if (e.is_directory()) runs.push_back(e.path());
            }
            std::sort(runs.begin(), runs.end());
            out.insert(out.end(), runs.begin(), runs.end());
        } else {
            out.push_back(p);
        }
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dualinc: continual instruction tuning with low-rank increment pools"};
    app.require_subcommand(1);

    Common gen_opts, pre_opts, run_opts;
    auto* gen = app.add_subcommand("gen-data", "generate the synthetic task stream");
    add_common(gen, gen_opts);

    auto* pre = app.add_subcommand("pretrain", "pretrain the frozen base model");
    add_common(pre, pre_opts);

    auto* run = app.add_subcommand("run", "train the method x order x seed grid");
    add_common(run, run_opts);
    std::vector<std::string> methods;
    run->add_option("--method", methods, "restrict to these methods (repeatable)");

    auto* rep = app.add_subcommand("report", "CSV and Markdown tables from run dirs");
    std::vector<std::string> report_dirs;
    std::string report_out = "report";
    bool verify = false;
    rep->add_option("dirs", report_dirs, "run dirs or experiment output dirs")->required();
    rep->add_option("--out", report_out, "directory for report.csv and report.md");
    rep->add_flag("--verify", verify, "recompute every number from the accuracy matrices");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    try {
        if (gen->parsed()) {
            auto c = resolve_config(gen_opts);
            if (gen_opts.seed) c.data.seed = *gen_opts.seed;
            const auto r = ex::gen_data(c);
            line((r.up_to_date ? "up-to-date " : "generated ") + r.manifest.string());
        } else if (pre->parsed()) {
            auto c = resolve_config(pre_opts);
            if (pre_opts.seed) c.pretrain.seed = *pre_opts.seed;
            const auto r = ex::pretrain(c);
            line((r.up_to_date ? "up-to-date " : "pretrained ") + r.checkpoint.string() +
                 " held-out exact match " + pct(r.held_out_accuracy) + "%");
        } else if (run->parsed()) {
            auto c = resolve_config(run_opts);
            if (run_opts.seed) c.sweep.seeds = {*run_opts.seed};
            if (!methods.empty()) {
                c.sweep.methods.clear();
                for (const auto& m : methods) c.sweep.methods.push_back(engine::method_from_string(m));
            }
            const auto grid = ex::run_grid(c, [](const ex::RunSpec& spec, const ex::RunOutcome& r) {
                std::string s = spec.name + ": ";
                if (!r.ok) {
                    s += "FAILED " + r.error;
                } else {
                    s += r.up_to_date ? "up-to-date" : (r.resumed ? "resumed" : "done");
                    s += " avg " + pct(r.aa);
                    if (r.af) s += " fgt " + pct(*r.af);
                }
                line(s);
            });
            line("aggregate " + grid.aggregate_csv.string());
            if (!grid.all_ok()) {
                std::cerr << "error: some runs failed\n";
                return kRuntime;
            }
        } else if (rep->parsed()) {
            const auto dirs = expand_dirs(report_dirs);
            const auto r = ex::build_report(dirs, verify);
            const fs::path out = ex::resolve(report_out);
            fs::create_directories(out);
            std::ofstream(out / "report.csv") << r.csv;
            std::ofstream(out / "report.md") << r.markdown;
            line("report " + (out / "report.md").string() + (verify ? " (verified)" : ""));
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kData;
    } catch (const CorruptFileError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kData;
    } catch (const VersionMismatchError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kRuntime;
    }
    return kOk;
}
