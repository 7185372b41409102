#include "pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <map>
#include <set>

#include <json.hpp>

#include "datasim.hpp"
#include "featselect.hpp"
#include "io_util.hpp"
#include "labeling.hpp"
#include "numerics.hpp"
#include "parallel.hpp"
#include "predictor.hpp"
#include "sae.hpp"
#include "stats.hpp"
#include "steering.hpp"
#include "svg.hpp"
#include "tinylm.hpp"

namespace saefin::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

namespace {

void check_keys(const json& j, const std::string& section,
                const std::set<std::string>& known) {
    for (const auto& [key, value] : j.items()) {
        if (!known.count(key))
            throw ConfigError("unknown key \"" + key + "\" in " + section);
    }
}

template <typename T>
void read_if(const json& j, const char* key, T& into) {
    if (j.contains(key)) into = j.at(key).get<T>();
}

}  // namespace

ExperimentConfig parse_config(const std::string& json_text) {
    ExperimentConfig c;
    if (json_text.empty()) return c;
    json j;
    try {
        j = json::parse(json_text);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    check_keys(j, "config root",
               {"world", "lm", "sae", "tap", "labeling", "steering", "rolling",
                "cluster", "seed", "jobs"});

    if (j.contains("world")) {
        const json& w = j.at("world");
        check_keys(w, "world",
                   {"num_firms", "num_days", "news_per_firm_day",
                    "target_oracle_accuracy", "signal_to_noise", "daily_noise_vol",
                    "optimism_bias", "ambiguity_threshold", "horizon"});
        read_if(w, "num_firms", c.num_firms);
        read_if(w, "num_days", c.num_days);
        read_if(w, "news_per_firm_day", c.news_per_firm_day);
        read_if(w, "target_oracle_accuracy", c.target_oracle_accuracy);
        read_if(w, "signal_to_noise", c.signal_to_noise);
        read_if(w, "daily_noise_vol", c.daily_noise_vol);
        read_if(w, "optimism_bias", c.optimism_bias);
        read_if(w, "ambiguity_threshold", c.ambiguity_threshold);
        read_if(w, "horizon", c.horizon);
    }
    if (j.contains("lm")) {
        const json& m = j.at("lm");
        check_keys(m, "lm",
                   {"vocab_size", "hidden_dim", "num_layers", "num_heads",
                    "max_seq_len", "epochs", "learning_rate", "batch_size"});
        read_if(m, "vocab_size", c.vocab_size);
        read_if(m, "hidden_dim", c.hidden_dim);
        read_if(m, "num_layers", c.num_layers);
        read_if(m, "num_heads", c.num_heads);
        read_if(m, "max_seq_len", c.max_seq_len);
        read_if(m, "epochs", c.lm_epochs);
        read_if(m, "learning_rate", c.lm_learning_rate);
        read_if(m, "batch_size", c.lm_batch_size);
    }
    if (j.contains("sae")) {
        const json& s = j.at("sae");
        check_keys(s, "sae",
                   {"latent_dim", "sparsity_weight", "learning_rate", "epochs",
                    "batch_size", "max_residuals"});
        read_if(s, "latent_dim", c.latent_dim);
        read_if(s, "sparsity_weight", c.sparsity_weight);
        read_if(s, "learning_rate", c.sae_learning_rate);
        read_if(s, "epochs", c.sae_epochs);
        read_if(s, "batch_size", c.sae_batch_size);
        read_if(s, "max_residuals", c.max_residuals);
    }
    if (j.contains("tap")) c.tap = j.at("tap").get<std::size_t>();
    if (j.contains("labeling")) {
        const json& l = j.at("labeling");
        check_keys(l, "labeling", {"top_n", "overrides"});
        read_if(l, "top_n", c.label_top_n);
        if (l.contains("overrides") && !l.at("overrides").is_null())
            c.label_overrides = l.at("overrides").get<std::string>();
    }
    if (j.contains("steering")) {
        const json& s = j.at("steering");
        check_keys(s, "steering", {"grid", "repetitions", "temperature"});
        read_if(s, "grid", c.steering_grid);
        read_if(s, "repetitions", c.allocation_repetitions);
        read_if(s, "temperature", c.allocation_temperature);
    }
    if (j.contains("rolling")) {
        const json& r = j.at("rolling");
        check_keys(r, "rolling",
                   {"train_days", "validation_days", "refit_every", "quantile",
                    "min_names", "num_pcs", "feature_budgets"});
        read_if(r, "train_days", c.train_days);
        read_if(r, "validation_days", c.validation_days);
        read_if(r, "refit_every", c.refit_every);
        read_if(r, "quantile", c.quantile);
        read_if(r, "min_names", c.min_names);
        read_if(r, "num_pcs", c.num_pcs);
        read_if(r, "feature_budgets", c.feature_budgets);
    }
    if (j.contains("cluster")) {
        const json& cl = j.at("cluster");
        check_keys(cl, "cluster", {"k_min", "k_max", "label_embed_dim", "merge_map"});
        read_if(cl, "k_min", c.cluster_k_min);
        read_if(cl, "k_max", c.cluster_k_max);
        read_if(cl, "label_embed_dim", c.label_embed_dim);
        if (cl.contains("merge_map") && !cl.at("merge_map").is_null())
            c.merge_map = cl.at("merge_map").get<std::string>();
    }
    read_if(j, "seed", c.seed);
    read_if(j, "jobs", c.jobs);

    if (c.train_days + c.validation_days >= c.num_days)
        throw ConfigError("rolling windows do not fit inside the world's days");
    if (c.quantile <= 0.0 || c.quantile > 0.5)
        throw ConfigError("quantile must be in (0, 0.5]");
    if (c.tap && *c.tap > c.num_layers)
        throw ConfigError("tap layer out of range");
    return c;
}

std::string config_to_json(const ExperimentConfig& c) {
    json j{
        {"world",
         {{"num_firms", c.num_firms},
          {"num_days", c.num_days},
          {"news_per_firm_day", c.news_per_firm_day},
          {"target_oracle_accuracy", c.target_oracle_accuracy},
          {"signal_to_noise", c.signal_to_noise},
          {"daily_noise_vol", c.daily_noise_vol},
          {"optimism_bias", c.optimism_bias},
          {"ambiguity_threshold", c.ambiguity_threshold},
          {"horizon", c.horizon}}},
        {"lm",
         {{"vocab_size", c.vocab_size},
          {"hidden_dim", c.hidden_dim},
          {"num_layers", c.num_layers},
          {"num_heads", c.num_heads},
          {"max_seq_len", c.max_seq_len},
          {"epochs", c.lm_epochs},
          {"learning_rate", c.lm_learning_rate},
          {"batch_size", c.lm_batch_size}}},
        {"sae",
         {{"latent_dim", c.latent_dim},
          {"sparsity_weight", c.sparsity_weight},
          {"learning_rate", c.sae_learning_rate},
          {"epochs", c.sae_epochs},
          {"batch_size", c.sae_batch_size},
          {"max_residuals", c.max_residuals}}},
        {"tap", c.tap_layer()},
        {"labeling", {{"top_n", c.label_top_n}}},
        {"steering",
         {{"grid", c.steering_grid},
          {"repetitions", c.allocation_repetitions},
          {"temperature", c.allocation_temperature}}},
        {"rolling",
         {{"train_days", c.train_days},
          {"validation_days", c.validation_days},
          {"refit_every", c.refit_every},
          {"quantile", c.quantile},
          {"min_names", c.min_names},
          {"num_pcs", c.num_pcs},
          {"feature_budgets", c.feature_budgets}}},
        {"cluster",
         {{"k_min", c.cluster_k_min},
          {"k_max", c.cluster_k_max},
          {"label_embed_dim", c.label_embed_dim}}},
        {"seed", c.seed},
        {"jobs", c.jobs},
    };
    if (c.label_overrides) j["labeling"]["overrides"] = *c.label_overrides;
    if (c.merge_map) j["cluster"]["merge_map"] = *c.merge_map;
    return j.dump(2);
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

namespace {

json load_manifest(const fs::path& run_dir) {
    const fs::path path = run_dir / "manifest.json";
    if (!fs::exists(path)) return json::object();
    return json::parse(io::read_file(path));
}

void record_stage(const fs::path& run_dir, const ExperimentConfig& config,
                  const std::string& stage, double seconds,
                  const std::vector<fs::path>& outputs,
                  const std::vector<fs::path>& inputs) {
    json manifest = load_manifest(run_dir);
    manifest["tool_version"] = kVersion;
    manifest["config"] = json::parse(config_to_json(config));
    manifest["effective_seed"] = config.seed;
    json stage_entry;
    stage_entry["seconds"] = seconds;
    json outs = json::object();
    for (const auto& p : outputs)
        outs[fs::relative(p, run_dir).generic_string()] = io::sha256_file(p);
    stage_entry["outputs"] = outs;
    json ins = json::object();
    for (const auto& p : inputs)
        if (fs::exists(p)) ins[fs::relative(p, run_dir).generic_string()] = io::sha256_file(p);
    stage_entry["inputs"] = ins;
    manifest["stages"][stage] = stage_entry;
    io::atomic_write(run_dir / "manifest.json", manifest.dump(2));
}

void require_absent_or_force(const std::vector<fs::path>& outputs, bool force) {
    if (force) return;
    for (const auto& p : outputs) {
        if (fs::exists(p))
            throw ConfigError("output already exists (use --force to overwrite): " +
                              p.string());
    }
}

datasim::WorldSpec world_spec_of(const ExperimentConfig& c) {
    datasim::WorldSpec spec;
    spec.num_firms = c.num_firms;
    spec.num_days = c.num_days;
    spec.news_per_firm_day = c.news_per_firm_day;
    spec.signal_to_noise = c.signal_to_noise;
    spec.target_oracle_accuracy = c.target_oracle_accuracy;
    spec.daily_noise_vol = c.daily_noise_vol;
    spec.horizon = c.horizon;
    spec.optimism_bias = c.optimism_bias;
    spec.ambiguity_threshold = c.ambiguity_threshold;
    spec.vocab_size = c.vocab_size;
    spec.seed = c.seed;
    // token budget: news plus query and answer slots must fit the model
    spec.max_news_len = std::min<std::size_t>(spec.max_news_len, c.max_seq_len - 3);
    return spec;
}

lm::TinyLmConfig lm_config_of(const ExperimentConfig& c) {
    lm::TinyLmConfig lc;
    lc.vocab_size = c.vocab_size;
    lc.hidden_dim = c.hidden_dim;
    lc.num_layers = c.num_layers;
    lc.num_heads = c.num_heads;
    lc.max_seq_len = c.max_seq_len;
    lc.seed = c.seed;
    return lc;
}

predictor::RollingConfig rolling_config_of(const ExperimentConfig& c) {
    predictor::RollingConfig rc;
    rc.train_days = c.train_days;
    rc.validation_days = c.validation_days;
    rc.refit_every = c.refit_every;
    rc.quantile = c.quantile;
    rc.min_names = c.min_names;
    rc.num_pcs = c.num_pcs;
    return rc;
}

struct LoadedRun {
    datasim::World world;
    std::optional<lm::TinyLm> model;
    std::optional<sae::Sae> autoenc;
};

datasim::World load_world_checked(const fs::path& run_dir) {
    const fs::path dir = run_dir / "world";
    if (!fs::exists(dir / "news.jsonl"))
        throw std::runtime_error("world not found under " + dir.string() +
                                 " (run the simulate stage first)");
    return datasim::load_world(dir);
}

lm::TinyLm load_model_checked(const fs::path& run_dir) {
    const fs::path path = run_dir / "model.ckpt";
    if (!fs::exists(path))
        throw std::runtime_error("model checkpoint missing (run train-lm first)");
    return lm::load_checkpoint(path);
}

sae::Sae load_sae_checked(const fs::path& run_dir) {
    const fs::path path = run_dir / "sae.ckpt";
    if (!fs::exists(path))
        throw std::runtime_error("autoencoder checkpoint missing (run train-sae first)");
    return sae::load_checkpoint(path);
}

std::vector<labeling::FeatureDossier> load_dossiers_checked(const fs::path& run_dir) {
    const fs::path path = run_dir / "dossiers.jsonl";
    if (!fs::exists(path))
        throw std::runtime_error("dossiers missing (run the label stage first)");
    return labeling::load_dossiers(path);
}

// Candidate features for a concept: ranked by the correlation between their
// news-level embedding activation and the concept's token share. Dossier
// labels and top-activation evidence select the pool; the correlation orders it.
std::vector<std::size_t> concept_candidates(const num::Matrix& embeddings,
                                            const datasim::World& world,
                                            const std::string& class_name,
                                            std::size_t max_candidates) {
    const std::size_t n = embeddings.rows(), k = embeddings.cols();
    std::vector<double> share(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t hits = 0;
        for (datasim::Token t : world.news[i].tokens)
            if (world.vocab.class_name(t) == class_name) ++hits;
        share[i] = static_cast<double>(hits) /
                   static_cast<double>(world.news[i].tokens.size());
    }
    double share_mean = 0.0;
    for (double s : share) share_mean += s;
    share_mean /= static_cast<double>(n);
    double share_var = 0.0;
    for (double s : share) share_var += (s - share_mean) * (s - share_mean);

    std::vector<std::pair<double, std::size_t>> scored;
    for (std::size_t j = 0; j < k; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += embeddings.at(i, j);
        mean /= static_cast<double>(n);
        double var = 0.0, cov = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = embeddings.at(i, j) - mean;
            var += d * d;
            cov += d * (share[i] - share_mean);
        }
        if (var <= 1e-18 || share_var <= 1e-18) continue;
        scored.emplace_back(cov / std::sqrt(var * share_var), j);
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    std::vector<std::size_t> out;
    for (const auto& [corr, j] : scored) {
        if (corr <= 0.0) break;
        out.push_back(j);
        if (out.size() == max_candidates) break;
    }
    if (out.empty())
        throw std::runtime_error("no feature correlates with class \"" + class_name +
                                 "\"; the autoencoder did not isolate this concept");
    return out;
}

// Validates candidates causally: probes a small news subsample at +/-2 and
// keeps the feature with the strongest positive dose-response on the share of
// Positive classifications. Mirrors the validation table the experiments then
// reproduce on the full corpus.
std::size_t select_positivity_feature(const lm::TinyLm& model, const sae::Sae& autoenc,
                                      const datasim::World& world,
                                      const num::Matrix& embeddings, lm::TapPoint tap) {
    const auto candidates =
        concept_candidates(embeddings, world, "positive-sentiment", 6);
    const std::size_t probe_count = std::min<std::size_t>(world.news.size(), 256);
    double best_slope = -1e300;
    std::size_t best = candidates.front();
    for (std::size_t j : candidates) {
        double frac[2] = {0.0, 0.0};
        const double strengths[2] = {-2.0, 2.0};
        for (int s = 0; s < 2; ++s) {
            std::vector<std::size_t> positive(probe_count, 0);
            parallel_for(probe_count, [&](std::size_t i) {
                const auto c = steering::classify_news(model, autoenc, world.vocab,
                                                       world.news[i],
                                                       {j, strengths[s], tap});
                positive[i] = c == datasim::Classification::Positive ? 1 : 0;
            });
            std::size_t total = 0;
            for (std::size_t v : positive) total += v;
            frac[s] = static_cast<double>(total) / static_cast<double>(probe_count);
        }
        const double slope = frac[1] - frac[0];
        if (slope > best_slope) {
            best_slope = slope;
            best = j;
        }
    }
    return best;
}

// Risk feature: candidates by risk-token correlation, validated by the
// steepest negative slope of the expected allocation implied by the steered
// answer distribution.
std::size_t select_risk_feature(const lm::TinyLm& model, const sae::Sae& autoenc,
                                const datasim::World& world,
                                const num::Matrix& embeddings, lm::TapPoint tap,
                                std::uint64_t seed) {
    const auto candidates = concept_candidates(embeddings, world, "risk", 6);
    const lm::TokenSeq prompt = datasim::make_allocation_prompt(world.vocab, seed);
    auto expected_allocation = [&](std::size_t feature, double strength) {
        std::vector<double> dist;
        if (strength == 0.0) {
            dist = lm::forward(model, prompt).final_distribution;
        } else {
            dist = lm::forward_with_injection(
                       model, prompt, tap,
                       steering::steering_delta(autoenc, {feature, strength, tap}))
                       .final_distribution;
        }
        double mass = 0.0, value = 0.0;
        for (datasim::Token b : world.vocab.alloc_buckets) {
            mass += dist[b];
            value += dist[b] * world.vocab.alloc_bucket_value(b);
        }
        return mass > 0.0 ? value / mass : 50.0;
    };
    double best_slope = 1e300;
    std::size_t best = candidates.front();
    for (std::size_t j : candidates) {
        const double slope = expected_allocation(j, 2.0) - expected_allocation(j, -2.0);
        if (slope < best_slope) {
            best_slope = slope;
            best = j;
        }
    }
    return best;
}

std::vector<predictor::NewsRow> news_rows_of(const datasim::World& world) {
    std::vector<predictor::NewsRow> rows;
    rows.reserve(world.news.size());
    for (const auto& item : world.news)
        rows.push_back({item.id, item.firm, item.day});
    return rows;
}

std::vector<int> return_sign_labels(const datasim::World& world) {
    std::vector<int> labels;
    labels.reserve(world.news.size());
    for (const auto& item : world.news) {
        const auto ret = world.panel.tradable_return(item);
        if (!ret)
            throw std::runtime_error("news item without tradable return in labels");
        labels.push_back(*ret > 0.0 ? 1 : 0);
    }
    return labels;
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

void stage_simulate(const ExperimentConfig& config, const fs::path& run_dir, bool force) {
    const fs::path dir = run_dir / "world";
    require_absent_or_force({dir / "news.jsonl", dir / "returns.csv",
                             dir / "truth.jsonl"}, force);
    const datasim::World world = datasim::generate_world(world_spec_of(config));
    datasim::export_world(world, dir);
}

void stage_train_lm(const ExperimentConfig& config, const fs::path& run_dir, bool force) {
    require_absent_or_force({run_dir / "model.ckpt"}, force);
    const datasim::World world = load_world_checked(run_dir);
    const datasim::TrainingCorpus corpus = datasim::build_lm_corpus(world);

    lm::LmTrainOptions options;
    options.epochs = config.lm_epochs;
    options.learning_rate = config.lm_learning_rate;
    options.batch_size = config.lm_batch_size;
    const lm::LmTrainResult result =
        lm::train_lm(lm_config_of(config), corpus.sequences, options);

    lm::save_checkpoint(result.model, run_dir / "model.ckpt");
    io::CsvWriter history({"epoch", "train_ce", "holdout_ce"});
    for (std::size_t e = 0; e < result.epoch_losses.size(); ++e) {
        history.add_row({io::CsvWriter::format_int(static_cast<long long>(e)),
                         io::CsvWriter::format_number(result.epoch_losses[e]),
                         e + 1 == result.epoch_losses.size()
                             ? io::CsvWriter::format_number(result.holdout_ce)
                             : ""});
    }
    history.write(run_dir / "lm_history.csv");
}

void stage_train_sae(const ExperimentConfig& config, const fs::path& run_dir, bool force) {
    require_absent_or_force({run_dir / "sae.ckpt"}, force);
    const datasim::World world = load_world_checked(run_dir);
    const lm::TinyLm model = load_model_checked(run_dir);
    const datasim::TrainingCorpus corpus = datasim::build_lm_corpus(world);

    lm::ResidualDataset residuals = lm::collect_residuals(
        model, corpus.sequences, {config.tap_layer()});

    // deterministic subsample when the corpus is large
    num::Matrix data = residuals.vectors;
    if (data.rows() > config.max_residuals) {
        std::vector<std::size_t> order(data.rows());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        num::RngStream rng = num::RngStream(config.seed).split("residual-subsample");
        rng.shuffle(order);
        num::Matrix sampled(config.max_residuals, data.cols());
        for (std::size_t i = 0; i < config.max_residuals; ++i)
            std::copy(data.data() + order[i] * data.cols(),
                      data.data() + (order[i] + 1) * data.cols(),
                      sampled.data() + i * data.cols());
        data = std::move(sampled);
    }

    sae::SaeConfig sc;
    sc.input_dim = config.hidden_dim;
    sc.latent_dim = config.latent_dim;
    sc.sparsity_weight = config.sparsity_weight;
    sc.learning_rate = config.sae_learning_rate;
    sc.epochs = config.sae_epochs;
    sc.batch_size = config.sae_batch_size;
    sc.seed = config.seed;
    const sae::SaeTrainResult result = sae::train_sae(sc, data);

    sae::save_checkpoint(result.sae, run_dir / "sae.ckpt");
    sae::write_metrics_csv(result.history, run_dir / "sae_history.csv");

    io::CsvWriter dead({"feature"});
    for (std::size_t f : result.dead_features)
        dead.add_row({io::CsvWriter::format_int(static_cast<long long>(f))});
    dead.write(run_dir / "dead_features.csv");
}

void stage_label(const ExperimentConfig& config, const fs::path& run_dir, bool force) {
    require_absent_or_force({run_dir / "dossiers.jsonl"}, force);
    const datasim::World world = load_world_checked(run_dir);
    const lm::TinyLm model = load_model_checked(run_dir);
    const sae::Sae autoenc = load_sae_checked(run_dir);
    const datasim::TrainingCorpus corpus = datasim::build_lm_corpus(world);

    const lm::ResidualDataset residuals = lm::collect_residuals(
        model, corpus.sequences, {config.tap_layer()});
    std::vector<labeling::FeatureDossier> dossiers = labeling::build_all_dossiers(
        autoenc, residuals, corpus.sequences, world.vocab, config.label_top_n);
    if (config.label_overrides)
        labeling::apply_label_overrides(dossiers, *config.label_overrides);
    labeling::export_dossiers(dossiers, run_dir / "dossiers.jsonl");
}

num::Matrix load_or_build_embeddings(const ExperimentConfig& config,
                                     const fs::path& run_dir,
                                     const datasim::World& world) {
    const fs::path cache = run_dir / "embeddings.ckpt";
    if (fs::exists(cache)) {
        const io::TensorFile tf = io::TensorFile::load(cache);
        const auto meta = nlohmann::json::parse(tf.meta_json);
        if (meta.at("tap").get<std::size_t>() == config.tap_layer() &&
            meta.at("count").get<std::size_t>() == world.news.size())
            return tf.get("news_embeddings");
    }
    const lm::TinyLm model = load_model_checked(run_dir);
    const sae::Sae autoenc = load_sae_checked(run_dir);
    const num::Matrix embeddings = featselect::embed_all_news(
        model, autoenc, world, {config.tap_layer()});
    io::TensorFile tf;
    tf.meta_json = json{{"kind", "embeddings"},
                        {"tap", config.tap_layer()},
                        {"pooling", "mean"},
                        {"count", world.news.size()}}.dump();
    tf.add("news_embeddings", embeddings);
    tf.save(cache);
    return embeddings;
}

void stage_rank(const ExperimentConfig& config, const fs::path& run_dir, bool force) {
    require_absent_or_force({run_dir / "ranking.csv"}, force);
    const datasim::World world = load_world_checked(run_dir);
    const num::Matrix embeddings = load_or_build_embeddings(config, run_dir, world);
    const std::vector<int> labels = return_sign_labels(world);

    // diagnostic ranking over the first rolling training window only
    const std::uint32_t cutoff =
        world.news.front().day + static_cast<std::uint32_t>(config.train_days);
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < world.news.size(); ++i)
        if (world.news[i].day < cutoff) keep.push_back(i);
    num::Matrix window(keep.size(), embeddings.cols());
    std::vector<int> window_labels;
    for (std::size_t i = 0; i < keep.size(); ++i) {
        std::copy(embeddings.data() + keep[i] * embeddings.cols(),
                  embeddings.data() + (keep[i] + 1) * embeddings.cols(),
                  window.data() + i * embeddings.cols());
        window_labels.push_back(labels[keep[i]]);
    }
    const std::size_t pcs =
        std::min(config.num_pcs, std::min(window.rows() - 1, window.cols()));
    const featselect::FeatureRanking ranking =
        featselect::rank_features(window, window_labels, pcs, "first-window");
    featselect::write_ranking_csv(ranking, run_dir / "ranking.csv");
}

stats::PipelineOutcome run_prediction_pipeline(
    const ExperimentConfig& config, const num::Matrix& embeddings,
    const std::vector<predictor::NewsRow>& rows, const std::vector<int>& labels,
    const datasim::ReturnPanel& panel, const std::vector<std::size_t>& features,
    std::size_t budget, std::vector<predictor::PredictionRecord>* records_out = nullptr,
    std::vector<predictor::PortfolioDay>* days_out = nullptr) {
    predictor::RollingConfig rc = rolling_config_of(config);
    rc.feature_budget = budget;
    const auto windows = predictor::fit_rolling(rc, embeddings, rows, labels, &features);
    const auto outcome = predictor::predict(windows, embeddings, rows);
    const auto days = predictor::build_portfolios(outcome.records, panel, rc);
    const auto accuracy = predictor::prediction_accuracy(outcome.records, panel);

    stats::PipelineOutcome result;
    for (const auto& d : days) {
        if (d.skipped) continue;
        result.returns.push_back(d.ret);
        result.days.push_back(d.day);
    }
    result.average_daily_accuracy = accuracy.average_daily;
    result.total_accuracy = accuracy.total;
    if (records_out) *records_out = outcome.records;
    if (days_out) *days_out = days;
    return result;
}

void stage_backtest(const ExperimentConfig& config, const fs::path& run_dir, bool force) {
    require_absent_or_force({run_dir / "sharpe_by_k.csv"}, force);
    const datasim::World world = load_world_checked(run_dir);
    const num::Matrix embeddings = load_or_build_embeddings(config, run_dir, world);
    const std::vector<predictor::NewsRow> rows = news_rows_of(world);
    const std::vector<int> labels = return_sign_labels(world);

    std::vector<std::size_t> all_features(config.latent_dim);
    for (std::size_t j = 0; j < all_features.size(); ++j) all_features[j] = j;

    // the full model anchors the significance tests and the output files
    std::vector<predictor::PredictionRecord> full_records;
    std::vector<predictor::PortfolioDay> full_days;
    const stats::PipelineOutcome full =
        run_prediction_pipeline(config, embeddings, rows, labels, world.panel,
                                all_features, config.latent_dim, &full_records,
                                &full_days);
    predictor::write_predictions_csv(full_records, run_dir / "predictions.csv");
    predictor::write_portfolio_csv(full_days, run_dir / "portfolio.csv");

    struct Row {
        std::string k;
        stats::PipelineOutcome outcome;
    };
    std::vector<Row> table;
    std::vector<std::size_t> budgets = config.feature_budgets;
    table.resize(budgets.size());
    parallel_for(budgets.size(), [&](std::size_t i) {
        const std::size_t budget = std::min(budgets[i], config.latent_dim);
        table[i].k = std::to_string(budgets[i]);
        table[i].outcome = run_prediction_pipeline(config, embeddings, rows, labels,
                                                   world.panel, all_features, budget);
    });
    table.push_back({"full", full});

    // oracle: trade the hidden sentiment over the same out-of-sample days
    {
        std::uint32_t first_cover = 0;
        for (const auto& r : full_records) {
            first_cover = r.day;
            break;
        }
        std::vector<predictor::PredictionRecord> oracle_records;
        for (const auto& item : world.news) {
            if (item.day < first_cover) continue;
            oracle_records.push_back(
                {item.id, item.firm, item.day,
                 0.5 * (1.0 + world.truth.latent_sentiments[item.id])});
        }
        const auto oracle_days = predictor::build_portfolios(
            oracle_records, world.panel, rolling_config_of(config));
        const auto oracle_accuracy =
            predictor::prediction_accuracy(oracle_records, world.panel);
        stats::PipelineOutcome oracle;
        for (const auto& d : oracle_days) {
            if (d.skipped) continue;
            oracle.returns.push_back(d.ret);
            oracle.days.push_back(d.day);
        }
        oracle.average_daily_accuracy = oracle_accuracy.average_daily;
        oracle.total_accuracy = oracle_accuracy.total;
        table.push_back({"oracle", oracle});
    }

    io::CsvWriter csv({"k", "sharpe", "p_vs_full", "accuracy", "n_days"});
    for (const auto& row : table) {
        std::string sharpe = "missing", p = "";
        if (row.outcome.returns.size() >= 2) {
            const stats::SharpeReport rep = stats::annualized_sharpe(row.outcome.returns);
            if (rep.annualized) sharpe = io::CsvWriter::format_number(*rep.annualized);
        }
        if (row.k != "full" && !row.outcome.returns.empty() && !full.returns.empty()) {
            std::vector<double> pa, pb;
            stats::pair_by_day(row.outcome.returns, row.outcome.days, full.returns,
                               full.days, pa, pb);
            if (pa.size() >= 2 && pa != pb) {
                try {
                    // one-sided: is this model's Sharpe lower than the full model's?
                    p = io::CsvWriter::format_number(
                        stats::jk_memmel_test(pa, pb, stats::Alternative::Less).p_value);
                } catch (const std::invalid_argument&) {
                }
            }
        }
        csv.add_row({row.k, sharpe, p,
                     io::CsvWriter::format_number(row.outcome.average_daily_accuracy),
                     io::CsvWriter::format_int(
                         static_cast<long long>(row.outcome.returns.size()))});
    }
    csv.write(run_dir / "sharpe_by_k.csv");
}

void stage_steer(const ExperimentConfig& config, const fs::path& run_dir, bool force) {
    require_absent_or_force({run_dir / "steering_returns.csv",
                             run_dir / "allocations.csv"}, force);
    const datasim::World world = load_world_checked(run_dir);
    const lm::TinyLm model = load_model_checked(run_dir);
    const sae::Sae autoenc = load_sae_checked(run_dir);
    const auto dossiers = load_dossiers_checked(run_dir);
    const num::Matrix embeddings = load_or_build_embeddings(config, run_dir, world);
    const lm::TapPoint tap{config.tap_layer()};

    // Table-3 analog: classification shares and conditional returns by strength
    const std::size_t positivity =
        select_positivity_feature(model, autoenc, world, embeddings, tap);
    const steering::ClassificationGrid grid = steering::steering_grid_classification(
        model, autoenc, world, config.steering_grid, positivity, tap);
    steering::write_classification_csv(grid, run_dir / "steering_returns.csv");

    // portfolio Sharpe and alpha per steering level against the unsteered run
    const std::vector<predictor::NewsRow> rows = news_rows_of(world);
    const predictor::RollingConfig rc = rolling_config_of(config);
    struct SteerPortfolio {
        double strength;
        std::vector<double> returns;
        std::vector<std::uint32_t> days;
    };
    std::vector<SteerPortfolio> portfolios(config.steering_grid.size());
    for (std::size_t i = 0; i < config.steering_grid.size(); ++i) {
        const double strength = config.steering_grid[i];
        const auto labels = steering::classify_all(model, autoenc, world,
                                                   {positivity, strength, tap});
        const auto days = predictor::classification_portfolio(labels, rows, world.panel,
                                                              rc);
        portfolios[i].strength = strength;
        for (const auto& d : days) {
            if (d.skipped) continue;
            portfolios[i].returns.push_back(d.ret);
            portfolios[i].days.push_back(d.day);
        }
    }
    const SteerPortfolio* baseline = nullptr;
    for (const auto& p : portfolios)
        if (p.strength == 0.0) baseline = &p;
    if (!baseline) throw ConfigError("steering grid must include strength 0");

    io::CsvWriter sa({"strength", "n_days", "sharpe", "alpha_annualized", "alpha_t",
                      "p_vs_baseline"});
    svg::Series sharpe_series{"sharpe", {}, {}, "#1f77b4"};
    for (const auto& p : portfolios) {
        std::string sharpe = "missing", alpha = "", alpha_t = "", pval = "";
        if (p.returns.size() >= 2) {
            const auto rep = stats::annualized_sharpe(p.returns);
            if (rep.annualized) {
                sharpe = io::CsvWriter::format_number(*rep.annualized);
                sharpe_series.x.push_back(p.strength);
                sharpe_series.y.push_back(*rep.annualized);
            }
        }
        if (p.strength != 0.0 && !p.returns.empty()) {
            std::vector<double> pa, pb;
            stats::pair_by_day(p.returns, p.days, baseline->returns, baseline->days, pa,
                               pb);
            if (pa.size() >= 3 && pa != pb) {
                try {
                    const auto reg = stats::alpha_regression(pa, pb);
                    alpha = io::CsvWriter::format_number(reg.alpha_annualized);
                    alpha_t = io::CsvWriter::format_number(reg.alpha_t);
                    pval = io::CsvWriter::format_number(
                        stats::jk_memmel_test(pa, pb).p_value);
                } catch (const std::invalid_argument&) {
                }
            }
        }
        sa.add_row({io::CsvWriter::format_number(p.strength),
                    io::CsvWriter::format_int(static_cast<long long>(p.returns.size())),
                    sharpe, alpha, alpha_t, pval});
    }
    sa.write(run_dir / "sharpe_alpha_steering.csv");

    svg::LineChart chart;
    chart.title = "Long-short Sharpe by steering strength";
    chart.x_label = "steering strength (decoder-norm units)";
    chart.y_label = "annualized Sharpe";
    chart.series.push_back(sharpe_series);
    chart.write(run_dir / "sharpe_alpha_steering.svg");

    // allocation dose-response on the risk feature
    const std::size_t risk =
        select_risk_feature(model, autoenc, world, embeddings, tap, config.seed);

    io::CsvWriter chosen({"concept", "feature", "dossier_label"});
    chosen.add_row({"positive-sentiment",
                    io::CsvWriter::format_int(static_cast<long long>(positivity)),
                    dossiers.at(positivity).label});
    chosen.add_row({"risk", io::CsvWriter::format_int(static_cast<long long>(risk)),
                    dossiers.at(risk).label});
    chosen.write(run_dir / "steering_features.csv");
    steering::AllocationOptions opt;
    opt.repetitions = config.allocation_repetitions;
    opt.temperature = config.allocation_temperature;
    opt.seed = config.seed;
    const lm::TokenSeq prompt = datasim::make_allocation_prompt(world.vocab, config.seed);
    const steering::AllocationGrid alloc = steering::allocation_experiment(
        model, autoenc, world.vocab, prompt, config.steering_grid, risk, tap, opt);
    steering::write_allocation_csv(alloc, run_dir / "allocations.csv");

    svg::LineChart alloc_chart;
    alloc_chart.title = "Mean allocation by risk-feature steering";
    alloc_chart.x_label = "steering strength (decoder-norm units)";
    alloc_chart.y_label = "mean allocation (dollars)";
    svg::Series alloc_series{"allocation", {}, {}, "#d62728"};
    for (const auto& r : alloc.rows) {
        if (r.n_answered == 0) continue;
        alloc_series.x.push_back(r.strength);
        alloc_series.y.push_back(r.mean_allocation);
    }
    alloc_chart.series.push_back(alloc_series);
    alloc_chart.write(run_dir / "allocations.svg");
}

void stage_cluster(const ExperimentConfig& config, const fs::path& run_dir, bool force) {
    require_absent_or_force({run_dir / "clusters.csv"}, force);
    const auto dossiers = load_dossiers_checked(run_dir);
    std::vector<std::string> labels;
    labels.reserve(dossiers.size());
    for (const auto& d : dossiers) labels.push_back(d.label);

    const num::Matrix embedded = stats::embed_labels(labels, config.label_embed_dim);
    stats::ClusterAssignment assignment = stats::cluster_labels(
        embedded, config.cluster_k_min, config.cluster_k_max, config.seed);

    std::map<std::size_t, std::string> merge_map;
    if (config.merge_map) {
        merge_map = stats::load_merge_map(*config.merge_map);
    } else {
        // automatic naming: each raw cluster takes its modal dossier label;
        // clusters sharing a modal label merge into one group
        for (std::size_t c = 0; c < assignment.chosen_k; ++c) {
            std::map<std::string, std::size_t> counts;
            for (std::size_t i = 0; i < labels.size(); ++i)
                if (assignment.cluster_of[i] == c) counts[labels[i]] += 1;
            std::string best = "unused-cluster-" + std::to_string(c);
            std::size_t best_count = 0;
            for (const auto& [name, count] : counts) {
                if (count > best_count) {
                    best = name;
                    best_count = count;
                }
            }
            merge_map[c] = best;
        }
    }
    json merge_json = json::object();
    for (const auto& [id, name] : merge_map) merge_json[std::to_string(id)] = name;
    io::atomic_write(run_dir / "merge_map.json", merge_json.dump(2));
    stats::apply_merge_map(assignment, merge_map);

    io::CsvWriter csv({"feature", "raw_cluster", "group", "label"});
    for (std::size_t i = 0; i < labels.size(); ++i) {
        csv.add_row({io::CsvWriter::format_int(static_cast<long long>(i)),
                     io::CsvWriter::format_int(
                         static_cast<long long>(assignment.cluster_of[i])),
                     assignment.group_of[i], labels[i]});
    }
    csv.write(run_dir / "clusters.csv");

    io::CsvWriter meta({"chosen_k", "silhouette"});
    meta.add_row({io::CsvWriter::format_int(static_cast<long long>(assignment.chosen_k)),
                  io::CsvWriter::format_number(assignment.silhouette)});
    meta.write(run_dir / "cluster_summary.csv");
}

void stage_shapley(const ExperimentConfig& config, const fs::path& run_dir, bool force) {
    require_absent_or_force({run_dir / "shapley.csv"}, force);
    const datasim::World world = load_world_checked(run_dir);
    const num::Matrix embeddings = load_or_build_embeddings(config, run_dir, world);
    const std::vector<predictor::NewsRow> rows = news_rows_of(world);
    const std::vector<int> labels = return_sign_labels(world);

    const fs::path clusters_path = run_dir / "clusters.csv";
    if (!fs::exists(clusters_path))
        throw std::runtime_error("clusters.csv missing (run the cluster stage first)");
    const io::CsvTable clusters = io::read_csv(clusters_path);
    const std::size_t fcol = clusters.column("feature");
    const std::size_t gcol = clusters.column("group");
    std::map<std::string, std::vector<std::size_t>> groups;
    for (const auto& row : clusters.rows)
        groups[row[gcol]].push_back(std::stoull(row[fcol]));

    std::vector<std::size_t> all_features(config.latent_dim);
    for (std::size_t j = 0; j < all_features.size(); ++j) all_features[j] = j;

    const stats::PipelineRunner runner = [&](const std::vector<std::size_t>& features) {
        return run_prediction_pipeline(config, embeddings, rows, labels, world.panel,
                                       features, features.size());
    };
    const stats::ShapleyTable table = stats::shapley_sharpe_table(runner, groups,
                                                                  all_features);
    stats::write_shapley_csv(table, run_dir / "shapley.csv");
}

using StageFn = void (*)(const ExperimentConfig&, const fs::path&, bool);

const std::vector<std::pair<std::string, StageFn>>& stage_table() {
    static const std::vector<std::pair<std::string, StageFn>> stages{
        {"simulate", stage_simulate},   {"train-lm", stage_train_lm},
        {"train-sae", stage_train_sae}, {"label", stage_label},
        {"rank-features", stage_rank},  {"backtest", stage_backtest},
        {"steer", stage_steer},         {"cluster", stage_cluster},
        {"shapley", stage_shapley},
    };
    return stages;
}

std::vector<fs::path> stage_outputs(const std::string& stage, const fs::path& run_dir) {
    if (stage == "simulate")
        return {run_dir / "world/news.jsonl", run_dir / "world/returns.csv",
                run_dir / "world/truth.jsonl"};
    if (stage == "train-lm") return {run_dir / "model.ckpt", run_dir / "lm_history.csv"};
    if (stage == "train-sae")
        return {run_dir / "sae.ckpt", run_dir / "sae_history.csv",
                run_dir / "dead_features.csv"};
    if (stage == "label") return {run_dir / "dossiers.jsonl"};
    if (stage == "rank-features") return {run_dir / "ranking.csv"};
    if (stage == "backtest")
        return {run_dir / "sharpe_by_k.csv", run_dir / "predictions.csv",
                run_dir / "portfolio.csv", run_dir / "embeddings.ckpt"};
    if (stage == "steer")
        return {run_dir / "steering_returns.csv", run_dir / "sharpe_alpha_steering.csv",
                run_dir / "sharpe_alpha_steering.svg", run_dir / "allocations.csv",
                run_dir / "allocations.svg", run_dir / "steering_features.csv"};
    if (stage == "cluster")
        return {run_dir / "clusters.csv", run_dir / "merge_map.json",
                run_dir / "cluster_summary.csv"};
    if (stage == "shapley") return {run_dir / "shapley.csv"};
    return {};
}

void quarantine_outputs(const fs::path& run_dir) {
    const fs::path failed = run_dir / "failed";
    fs::create_directories(failed);
    for (const auto& entry : fs::directory_iterator(run_dir)) {
        if (entry.path().filename() == "failed") continue;
        fs::rename(entry.path(), failed / entry.path().filename());
    }
}

}  // namespace

const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> out;
        for (const auto& [name, fn] : stage_table()) out.push_back(name);
        return out;
    }();
    return names;
}

void run_stage(const std::string& stage, const ExperimentConfig& config_in,
               const fs::path& run_dir, bool force) {
    ExperimentConfig config = config_in;
    if (const char* env_seed = std::getenv("SAEFIN_SEED")) {
        try {
            config.seed = std::stoull(env_seed);
        } catch (const std::exception&) {
            throw ConfigError("SAEFIN_SEED is not an integer");
        }
    }
    if (config.jobs > 0) set_default_jobs(config.jobs);

    fs::create_directories(run_dir);

    if (stage == "pipeline") {
        try {
            for (const auto& [name, fn] : stage_table()) {
                const auto start = std::chrono::steady_clock::now();
                fn(config, run_dir, force);
                const double seconds =
                    std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                                  start)
                        .count();
                record_stage(run_dir, config, name, seconds,
                             stage_outputs(name, run_dir), {});
            }
        } catch (const ConfigError&) {
            throw;  // config problems leave existing outputs alone
        } catch (...) {
            quarantine_outputs(run_dir);
            throw;
        }
        return;
    }

    for (const auto& [name, fn] : stage_table()) {
        if (name != stage) continue;
        const auto start = std::chrono::steady_clock::now();
        fn(config, run_dir, force);
        const double seconds = std::chrono::duration<double>(
                                   std::chrono::steady_clock::now() - start)
                                   .count();
        record_stage(run_dir, config, name, seconds, stage_outputs(name, run_dir), {});
        return;
    }
    throw ConfigError("unknown stage \"" + stage + "\"");
}

ExperimentConfig config_from_manifest(const fs::path& manifest_path) {
    if (!fs::exists(manifest_path))
        throw ConfigError("manifest not found: " + manifest_path.string());
    const json manifest = json::parse(io::read_file(manifest_path));
    if (!manifest.contains("config"))
        throw ConfigError("manifest has no config snapshot");
    return parse_config(manifest.at("config").dump());
}

void write_report(const fs::path& run_dir, const fs::path& out_path) {
    struct Artifact {
        const char* file;
        const char* description;
    };
    static const Artifact artifacts[] = {
        {"world/news.jsonl", "synthetic news corpus (observable fields)"},
        {"world/returns.csv", "firm-day return panel"},
        {"world/truth.jsonl", "hidden ground truth (latent sentiment)"},
        {"model.ckpt", "trained toy language model"},
        {"lm_history.csv", "language-model training curve"},
        {"sae.ckpt", "trained sparse autoencoder"},
        {"sae_history.csv", "autoencoder loss/sparsity history"},
        {"dead_features.csv", "features that never activate"},
        {"dossiers.jsonl", "per-feature top-activation dossiers and labels"},
        {"ranking.csv", "feature importance in the first training window"},
        {"sharpe_by_k.csv", "long-short Sharpe by feature budget, incl. oracle"},
        {"predictions.csv", "out-of-sample news-level probabilities (full model)"},
        {"portfolio.csv", "daily long-short portfolio (full model)"},
        {"steering_returns.csv", "classification share and returns by steering level"},
        {"sharpe_alpha_steering.csv", "portfolio Sharpe/alpha by steering level"},
        {"sharpe_alpha_steering.svg", "Sharpe vs steering strength chart"},
        {"allocations.csv", "allocation answers by risk-feature steering"},
        {"allocations.svg", "allocation vs steering strength chart"},
        {"clusters.csv", "feature label clusters and named groups"},
        {"merge_map.json", "raw cluster to named group mapping"},
        {"shapley.csv", "leave-one-group-out Sharpe attribution"},
        {"manifest.json", "run manifest (config, seeds, digests, timings)"},
    };

    std::string md = "# Run report\n\n";
    md += "Run directory: `" + run_dir.string() + "`\n\n";
    std::vector<std::string> missing;
    md += "| artifact | description |\n|---|---|\n";
    for (const auto& a : artifacts) {
        if (fs::exists(run_dir / a.file)) {
            md += "| [" + std::string(a.file) + "](" + a.file + ") | " + a.description +
                  " |\n";
        } else {
            missing.push_back(a.file);
        }
    }
    if (!missing.empty()) {
        md += "\n## Missing artifacts\n\n";
        for (const auto& m : missing) md += "- `" + m + "`\n";
        md += "\nRun the corresponding stages (or the full pipeline) to produce them.\n";
    } else {
        md += "\nAll expected artifacts are present.\n";
    }
    io::atomic_write(out_path, md);
}

}  // namespace saefin::pipeline
