// Experiment runner: validated JSON configuration, disk-to-disk stages, a run
// manifest sufficient to reproduce every output, and the consolidated report.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace saefin::pipeline {

// Configuration problems exit with a distinct code at the CLI boundary.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
    // world
    std::size_t num_firms = 60;
    std::size_t num_days = 300;
    double news_per_firm_day = 0.35;
    double target_oracle_accuracy = 0.56;
    double signal_to_noise = 1.0;
    double daily_noise_vol = 0.02;
    double optimism_bias = 0.70;
    double ambiguity_threshold = 0.60;
    int horizon = 1;

    // language model
    std::uint32_t vocab_size = 64;
    std::size_t hidden_dim = 32;
    std::size_t num_layers = 4;
    std::size_t num_heads = 2;
    std::size_t max_seq_len = 48;
    std::size_t lm_epochs = 4;
    double lm_learning_rate = 3e-3;
    std::size_t lm_batch_size = 16;

    // autoencoder
    std::size_t latent_dim = 64;
    double sparsity_weight = 0.02;
    double sae_learning_rate = 3e-3;
    std::size_t sae_epochs = 25;
    std::size_t sae_batch_size = 64;
    std::size_t max_residuals = 30000;

    // tap: default is the midpoint layer; explicit values win
    std::optional<std::size_t> tap;

    // labeling
    std::size_t label_top_n = 20;
    std::optional<std::string> label_overrides;  // path to a JSON map

    // steering
    std::vector<double> steering_grid{-3, -2, -1, 0, 1, 2, 3};
    std::size_t allocation_repetitions = 100;
    double allocation_temperature = 1.0;

    // rolling prediction
    std::size_t train_days = 120;
    std::size_t validation_days = 30;
    std::size_t refit_every = 50;
    double quantile = 0.20;
    std::size_t min_names = 3;
    std::size_t num_pcs = 64;
    std::vector<std::size_t> feature_budgets{5, 10, 30, 50, 100, 300};

    // clustering
    std::size_t cluster_k_min = 2;
    std::size_t cluster_k_max = 12;
    std::size_t label_embed_dim = 64;
    std::optional<std::string> merge_map;  // path; absent = automatic naming

    std::uint64_t seed = 1;
    std::size_t jobs = 0;

    std::size_t tap_layer() const { return tap.value_or(num_layers / 2); }
};

// Strict parse: unknown keys are rejected, the embedded defaults fill gaps.
// An empty/missing json text yields the defaults.
ExperimentConfig parse_config(const std::string& json_text);
std::string config_to_json(const ExperimentConfig& config);

// Stage names in pipeline order.
const std::vector<std::string>& stage_names();

// Runs one stage (or "pipeline" for all of them) against a run directory.
// Stages read their inputs from disk and write their outputs plus a manifest
// update back to it. `force` permits overwriting stage outputs.
void run_stage(const std::string& stage, const ExperimentConfig& config,
               const std::filesystem::path& run_dir, bool force);

// Writes report.md summarizing a completed run; lists missing artifacts.
void write_report(const std::filesystem::path& run_dir,
                  const std::filesystem::path& out_path);

// Re-runs the full pipeline from the config snapshot in a manifest.
ExperimentConfig config_from_manifest(const std::filesystem::path& manifest_path);

inline constexpr const char* kVersion = "0.1.0";

}  // namespace saefin::pipeline
