// Synthetic market world generator: a token-level news corpus with planted
// concept structure (sentiment, topics, timing, risk), firm returns causally
// linked to the planted sentiment, and ground-truth dictionaries for
// recovery experiments. Stands in for a production news/returns feed.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "numerics.hpp"

namespace saefin::datasim {

using Token = std::uint32_t;
using TokenSeq = std::vector<Token>;

struct ConceptClass {
    std::string name;
    std::vector<Token> tokens;  // disjoint across classes
    double strength = 1.0;
};

// Fixed layout of the toy vocabulary: a handful of control tokens up front,
// then the planted concept classes. Token ids are stable given the size.
struct Vocabulary {
    Token bos = 0;
    Token classify_query = 1;
    Token answer_positive = 2;
    Token answer_negative = 3;
    Token alloc_query = 4;
    std::vector<Token> alloc_buckets;  // bucket i encodes 10*i dollars, i = 0..10
    std::vector<ConceptClass> classes;
    std::uint32_t size = 0;

    static Vocabulary standard(std::uint32_t size = 64);

    // Name of the concept class owning a token; empty for control tokens.
    const std::string& class_name(Token t) const;
    const ConceptClass& find_class(const std::string& name) const;
    bool is_alloc_bucket(Token t) const;
    int alloc_bucket_value(Token t) const;  // dollars, -1 if not a bucket

private:
    std::vector<std::string> class_by_token_;  // built by standard()
    friend Vocabulary make_vocabulary(std::uint32_t);
};

struct WorldSpec {
    std::size_t num_firms = 100;
    std::size_t num_days = 500;
    double news_per_firm_day = 0.25;  // Bernoulli rate per (firm, day)
    std::size_t min_news_len = 10;
    std::size_t max_news_len = 24;
    // Signal calibration: beta is solved so that the latent-sign oracle hits
    // target_oracle_accuracy, then multiplied by signal_to_noise.
    double signal_to_noise = 1.0;
    double target_oracle_accuracy = 0.54;
    double daily_noise_vol = 0.02;
    int horizon = 1;  // label/trade return is `horizon` days after the news
    // Corpus labeling skew: ambiguous items (|sentiment| below the threshold)
    // are labeled Positive at this rate in the LM training corpus.
    double optimism_bias = 0.60;
    double ambiguity_threshold = 1.0 / 3.0;
    std::uint32_t vocab_size = 64;
    std::uint64_t seed = 1;
};

struct NewsItem {
    std::uint64_t id = 0;
    std::uint32_t firm = 0;
    std::uint32_t day = 0;
    TokenSeq tokens;  // observable fields only
};

struct ReturnPanel {
    std::size_t num_firms = 0;
    std::size_t num_days = 0;
    num::Matrix returns;  // firm x day
    double beta = 0.0;
    double noise_vol = 0.0;
    int horizon = 1;

    double at(std::uint32_t firm, std::uint32_t day) const {
        return returns.at(firm, day);
    }
    // The tradable return matched to a news item, if inside the panel.
    std::optional<double> tradable_return(const NewsItem& item) const;
};

struct GroundTruth {
    num::Matrix dictionary;            // d x K_true; empty for token worlds
    std::vector<double> latent_sentiments;  // indexed by news id
    std::vector<std::uint32_t> firm_industry;  // industry class index per firm
};

struct World {
    WorldSpec spec;
    Vocabulary vocab;
    std::vector<NewsItem> news;
    ReturnPanel panel;
    GroundTruth truth;
};

World generate_world(const WorldSpec& spec);

enum class Classification { Positive, Negative };

// Sign of the hidden sentiment; ties go Positive.
Classification oracle_classifier(const GroundTruth& truth, const NewsItem& item);

// Accuracy of a classification stream against realized tradable return signs.
double classification_accuracy(const World& world,
                               const std::vector<Classification>& labels);

// --- LM training corpus -----------------------------------------------------

struct TrainingCorpus {
    std::vector<TokenSeq> sequences;
    // Index into `sequences` of the classification sequence built from news i;
    // -1 when the item had no tradable return.
    std::vector<std::ptrdiff_t> news_sequence;
};

// Classification sequences [BOS news... QUERY answer] with the optimism-bias
// label skew, plus allocation sequences [BOS context... ALLOC_QUERY bucket]
// teaching the model that risk-heavy contexts deserve smaller allocations.
TrainingCorpus build_lm_corpus(const World& world, double allocation_fraction = 0.25);

// Prompt for the allocation experiment: [BOS context... ALLOC_QUERY] with a
// neutral risk level, deterministic given the seed.
TokenSeq make_allocation_prompt(const Vocabulary& vocab, std::uint64_t seed,
                                double risk_level = 0.5);

// The classification prompt for one news item: [BOS news... QUERY].
TokenSeq make_classification_prompt(const Vocabulary& vocab, const NewsItem& item);

// --- direct sparse-dictionary generator -------------------------------------

struct ResidualGenSpec {
    std::size_t dim = 32;
    std::size_t num_components = 16;
    double expected_active = 3.0;   // mean L0 of the planted codes
    double noise_scale = 0.05;
    std::uint64_t seed = 1;
};

struct ResidualSample {
    num::Matrix vectors;  // size x dim
    num::Matrix codes;    // size x num_components, the planted sparse weights
    GroundTruth truth;    // dictionary populated, unit-norm columns
};

// x = D s + eps with non-negative sparse s; bypasses the language model so
// autoencoder recovery can be tested against a known dictionary.
ResidualSample generate_residual_dataset(const ResidualGenSpec& spec, std::size_t size);

// --- file formats ------------------------------------------------------------

// Writes news.jsonl / returns.csv / truth.jsonl under dir.
void export_world(const World& world, const std::filesystem::path& dir);
World load_world(const std::filesystem::path& dir);

}  // namespace saefin::datasim
