#include "steering.hpp"

#include <cmath>
#include <stdexcept>

#include "io_util.hpp"
#include "parallel.hpp"

namespace saefin::steering {

using datasim::Classification;

std::vector<double> steering_delta(const sae::Sae& sae, const SteeringSpec& spec) {
    if (spec.feature >= sae.config.latent_dim)
        throw std::invalid_argument("steering feature " + std::to_string(spec.feature) +
                                    " out of range for latent_dim " +
                                    std::to_string(sae.config.latent_dim));
    if (!std::isfinite(spec.strength))
        throw std::invalid_argument("steering strength must be finite");
    std::vector<double> delta(sae.config.input_dim, 0.0);
    if (spec.strength == 0.0) return delta;
    for (std::size_t i = 0; i < delta.size(); ++i)
        delta[i] = spec.strength * sae.decoder_weight.at(i, spec.feature);
    return delta;
}

SteeredDistribution steered_forward(const lm::TinyLm& model, const sae::Sae& sae,
                                    const lm::TokenSeq& tokens,
                                    const SteeringSpec& spec) {
    if (sae.config.input_dim != model.config.hidden_dim)
        throw std::invalid_argument("autoencoder width does not match the model");
    SteeredDistribution out;
    out.spec = spec;
    out.baseline = lm::forward(model, tokens).final_distribution;
    if (spec.strength == 0.0) {
        out.steered = out.baseline;  // bit-exact no-op
        return out;
    }
    const std::vector<double> delta = steering_delta(sae, spec);
    out.steered =
        lm::forward_with_injection(model, tokens, spec.tap, delta).final_distribution;
    return out;
}

namespace {

Classification classify_prompt(const lm::TinyLm& model, const sae::Sae& sae,
                               const datasim::Vocabulary& vocab,
                               const lm::TokenSeq& prompt, const SteeringSpec& spec) {
    if (vocab.answer_positive >= model.config.vocab_size ||
        vocab.answer_negative >= model.config.vocab_size)
        throw std::invalid_argument("answer tokens outside the model vocabulary");
    std::vector<double> dist;
    if (spec.strength == 0.0) {
        dist = lm::forward(model, prompt).final_distribution;
    } else {
        dist = lm::forward_with_injection(model, prompt, spec.tap,
                                          steering_delta(sae, spec))
                   .final_distribution;
    }
    const double p_pos = dist[vocab.answer_positive];
    const double p_neg = dist[vocab.answer_negative];
    return p_pos >= p_neg ? Classification::Positive : Classification::Negative;
}

}  // namespace

Classification classify_news(const lm::TinyLm& model, const sae::Sae& sae,
                             const datasim::Vocabulary& vocab,
                             const datasim::NewsItem& item, const SteeringSpec& spec) {
    return classify_prompt(model, sae, vocab,
                           datasim::make_classification_prompt(vocab, item), spec);
}

std::vector<Classification> classify_all(const lm::TinyLm& model, const sae::Sae& sae,
                                         const datasim::World& world,
                                         const SteeringSpec& spec) {
    std::vector<Classification> out(world.news.size(), Classification::Positive);
    parallel_for(world.news.size(), [&](std::size_t i) {
        out[i] = classify_news(model, sae, world.vocab, world.news[i], spec);
    });
    return out;
}

ClassificationGrid steering_grid_classification(
    const lm::TinyLm& model, const sae::Sae& sae, const datasim::World& world,
    const std::vector<double>& strengths, std::size_t feature, lm::TapPoint tap) {
    for (const auto& item : world.news) {
        if (!world.panel.tradable_return(item))
            throw std::invalid_argument("news item " + std::to_string(item.id) +
                                        " has no matched tradable return");
    }
    ClassificationGrid grid;
    grid.feature = feature;
    grid.tap = tap.layer;
    grid.rows.resize(strengths.size());
    for (std::size_t s = 0; s < strengths.size(); ++s) {
        const SteeringSpec spec{feature, strengths[s], tap};
        const std::vector<Classification> labels = classify_all(model, sae, world, spec);

        ClassificationRow row;
        row.strength = strengths[s];
        double sum_pos = 0.0, sum_neg = 0.0;
        for (std::size_t i = 0; i < world.news.size(); ++i) {
            const double ret = *world.panel.tradable_return(world.news[i]);
            if (labels[i] == Classification::Positive) {
                ++row.n_positive;
                sum_pos += ret;
            } else {
                ++row.n_negative;
                sum_neg += ret;
            }
        }
        const std::size_t total = row.n_positive + row.n_negative;
        row.positive_fraction =
            total == 0 ? 0.0 : static_cast<double>(row.n_positive) / total;
        if (row.n_positive > 0) row.mean_return_positive = sum_pos / row.n_positive;
        if (row.n_negative > 0) row.mean_return_negative = sum_neg / row.n_negative;
        grid.rows[s] = row;
    }
    return grid;
}

AllocationGrid allocation_experiment(const lm::TinyLm& model, const sae::Sae& sae,
                                     const datasim::Vocabulary& vocab,
                                     const lm::TokenSeq& prompt,
                                     const std::vector<double>& strengths,
                                     std::size_t feature, lm::TapPoint tap,
                                     const AllocationOptions& options) {
    if (prompt.empty() || prompt.back() != vocab.alloc_query)
        throw std::invalid_argument(
            "allocation prompt must end at the allocation answer slot");
    if (vocab.alloc_buckets.back() >= model.config.vocab_size)
        throw std::invalid_argument("allocation buckets outside the model vocabulary");

    AllocationGrid grid;
    grid.feature = feature;
    grid.tap = tap.layer;
    grid.repetitions = options.repetitions;
    grid.seed = options.seed;
    grid.rows.resize(strengths.size());

    const num::RngStream base = num::RngStream(options.seed).split("allocation");
    for (std::size_t s = 0; s < strengths.size(); ++s) {
        const SteeringSpec spec{feature, strengths[s], tap};
        std::vector<double> dist;
        if (spec.strength == 0.0) {
            dist = lm::forward(model, prompt).final_distribution;
        } else {
            dist = lm::forward_with_injection(model, prompt, tap,
                                              steering_delta(sae, spec))
                       .final_distribution;
        }

        std::vector<double> answers(options.repetitions);
        std::vector<char> abstained(options.repetitions, 0);
        parallel_for(options.repetitions, [&](std::size_t rep) {
            num::RngStream rng = base.split(s).split(rep);
            int value = -1;
            for (std::size_t attempt = 0; attempt <= options.max_retries; ++attempt) {
                const lm::Token tok = lm::sample_next(dist, options.mode,
                                                      options.temperature, rng);
                value = vocab.alloc_bucket_value(tok);
                if (value >= 0) break;
            }
            if (value >= 0) answers[rep] = value;
            else abstained[rep] = 1;
        });

        AllocationRow row;
        row.strength = strengths[s];
        double sum = 0.0;
        for (std::size_t rep = 0; rep < options.repetitions; ++rep) {
            if (abstained[rep]) ++row.n_abstained;
            else {
                sum += answers[rep];
                ++row.n_answered;
            }
        }
        if (row.n_answered > 0) {
            row.mean_allocation = sum / static_cast<double>(row.n_answered);
            double var = 0.0;
            for (std::size_t rep = 0; rep < options.repetitions; ++rep) {
                if (abstained[rep]) continue;
                const double d = answers[rep] - row.mean_allocation;
                var += d * d;
            }
            row.std_allocation = std::sqrt(var / static_cast<double>(row.n_answered));
        }
        grid.rows[s] = row;
    }
    return grid;
}

void write_classification_csv(const ClassificationGrid& grid,
                              const std::filesystem::path& path) {
    io::CsvWriter w({"strength", "pos_frac", "mean_ret_pos", "mean_ret_neg", "n_pos",
                     "n_neg"});
    for (const auto& r : grid.rows) {
        w.add_row({io::CsvWriter::format_number(r.strength),
                   io::CsvWriter::format_number(r.positive_fraction),
                   r.mean_return_positive
                       ? io::CsvWriter::format_number(*r.mean_return_positive)
                       : "missing",
                   r.mean_return_negative
                       ? io::CsvWriter::format_number(*r.mean_return_negative)
                       : "missing",
                   io::CsvWriter::format_int(static_cast<long long>(r.n_positive)),
                   io::CsvWriter::format_int(static_cast<long long>(r.n_negative))});
    }
    w.write(path);
}

void write_allocation_csv(const AllocationGrid& grid,
                          const std::filesystem::path& path) {
    io::CsvWriter w({"feature", "strength", "mean_alloc", "std", "n"});
    for (const auto& r : grid.rows) {
        w.add_row({io::CsvWriter::format_int(static_cast<long long>(grid.feature)),
                   io::CsvWriter::format_number(r.strength),
                   io::CsvWriter::format_number(r.mean_allocation),
                   io::CsvWriter::format_number(r.std_allocation),
                   io::CsvWriter::format_int(static_cast<long long>(r.n_answered))});
    }
    w.write(path);
}

}  // namespace saefin::steering
