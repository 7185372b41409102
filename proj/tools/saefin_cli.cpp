// Command-line runner for the saefin shared library. All heavy lifting goes
// through the C API; this file only parses arguments and assembles config
// JSON. Exit codes: 0 success, 2 configuration error, 3 runtime failure.
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "saefin/saefin.h"

namespace {

using nlohmann::ordered_json;

int status_to_exit_code(saefin_status status) {
    switch (status) {
        case SAEFIN_OK: return 0;
        case SAEFIN_ERR_CONFIG: return 2;
        case SAEFIN_ERR_INVALID_ARGUMENT: return 2;
        default: return 3;
    }
}

int report_failure(saefin_status status) {
    std::fprintf(stderr, "error: %s\n", saefin_last_error());
    return status_to_exit_code(status);
}

std::optional<std::string> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return std::nullopt;
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct CommonFlags {
    std::string config_path;
    std::string run_dir;
    std::string from_manifest;
    bool force = false;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> jobs;
    std::optional<std::size_t> tap;
};

void add_common(CLI::App* cmd, CommonFlags& flags, bool with_manifest) {
    cmd->add_option("--config,-c", flags.config_path, "experiment config JSON file");
    cmd->add_option("--out,-o", flags.run_dir, "run directory")->required();
    cmd->add_flag("--force,-f", flags.force, "overwrite existing stage outputs");
    cmd->add_option("--seed", flags.seed, "override the experiment seed");
    cmd->add_option("--jobs", flags.jobs, "worker cap (0 = all cores)");
    cmd->add_option("--tap", flags.tap, "residual-stream tap layer");
    if (with_manifest) {
        cmd->add_option("--from-manifest", flags.from_manifest,
                        "re-run from a previous run's manifest.json");
    }
}

// Assembled config: file (or manifest snapshot) + flag overrides.
int build_config_json(const CommonFlags& flags, std::string& out) {
    ordered_json config = ordered_json::object();
    if (!flags.from_manifest.empty()) {
        const auto text = read_file(flags.from_manifest);
        if (!text) {
            std::fprintf(stderr, "error: cannot read manifest %s\n",
                         flags.from_manifest.c_str());
            return 2;
        }
        try {
            const ordered_json manifest = ordered_json::parse(*text);
            config = manifest.at("config");
        } catch (const std::exception& e) {
            std::fprintf(stderr, "error: bad manifest: %s\n", e.what());
            return 2;
        }
    } else if (!flags.config_path.empty()) {
        const auto text = read_file(flags.config_path);
        if (!text) {
            std::fprintf(stderr, "error: cannot read config %s\n",
                         flags.config_path.c_str());
            return 2;
        }
        try {
            config = ordered_json::parse(*text);
        } catch (const std::exception& e) {
            std::fprintf(stderr, "error: config is not valid JSON: %s\n", e.what());
            return 2;
        }
    }
    if (flags.seed) config["seed"] = *flags.seed;
    if (flags.jobs) config["jobs"] = *flags.jobs;
    if (flags.tap) config["tap"] = *flags.tap;
    out = config.dump();
    return 0;
}

int run_stage_command(const std::string& stage, const CommonFlags& flags) {
    std::string config_json;
    if (const int rc = build_config_json(flags, config_json); rc != 0) return rc;
    const saefin_status status = saefin_run_stage(stage.c_str(), config_json.c_str(),
                                                  flags.run_dir.c_str(),
                                                  flags.force ? 1 : 0);
    if (status != SAEFIN_OK) return report_failure(status);
    std::printf("%s: done (%s)\n", stage.c_str(), flags.run_dir.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sparse-feature interpretability, steering, and market evaluation "
                 "toolkit (toy scale)"};
    app.require_subcommand(1);
    app.set_version_flag("--version", saefin_version());

    const std::vector<std::string> stages{"simulate",      "train-lm", "train-sae",
                                          "label",         "steer",    "rank-features",
                                          "backtest",      "cluster",  "shapley",
                                          "pipeline"};
    std::vector<std::pair<std::string, CommonFlags>> stage_flags;
    stage_flags.reserve(stages.size());
    for (const auto& stage : stages) {
        stage_flags.emplace_back(stage, CommonFlags{});
        CLI::App* cmd = app.add_subcommand(stage, "run the " + stage + " stage");
        add_common(cmd, stage_flags.back().second, stage == "pipeline");
    }

    std::string report_run, report_out;
    CLI::App* report = app.add_subcommand("report", "consolidated markdown report");
    report->add_option("--run,-r", report_run, "run directory")->required();
    report->add_option("--out,-o", report_out, "output path (default: <run>/report.md)");

    CLI::App* print_config =
        app.add_subcommand("print-config", "print the default config JSON");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    if (print_config->parsed()) {
        size_t needed = 0;
        if (saefin_default_config(nullptr, 0, &needed) != SAEFIN_OK)
            return report_failure(SAEFIN_ERR_RUNTIME);
        std::string buffer(needed, '\0');
        if (saefin_default_config(buffer.data(), buffer.size(), &needed) != SAEFIN_OK)
            return report_failure(SAEFIN_ERR_RUNTIME);
        std::printf("%s\n", buffer.c_str());
        return 0;
    }
    if (report->parsed()) {
        const std::string out =
            report_out.empty() ? report_run + "/report.md" : report_out;
        const saefin_status status = saefin_report(report_run.c_str(), out.c_str());
        if (status != SAEFIN_OK) return report_failure(status);
        std::printf("report: %s\n", out.c_str());
        return 0;
    }
    for (const auto& [stage, flags] : stage_flags) {
        if (app.get_subcommand(stage)->parsed()) return run_stage_command(stage, flags);
    }
    return 2;
}
