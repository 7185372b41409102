#include "datasim.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "io_util.hpp"

namespace saefin::datasim {

using num::RngStream;
using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

Vocabulary Vocabulary::standard(std::uint32_t size) {
    if (size < 64) throw std::invalid_argument("vocabulary needs at least 64 tokens");
    Vocabulary v;
    v.size = size;
    for (Token t = 5; t < 16; ++t) v.alloc_buckets.push_back(t);  // $0..$100 step 10

    Token next = 16;
    auto add_class = [&](const std::string& name, std::uint32_t count, double strength) {
        ConceptClass c;
        c.name = name;
        c.strength = strength;
        for (std::uint32_t i = 0; i < count; ++i) c.tokens.push_back(next++);
        v.classes.push_back(std::move(c));
    };
    add_class("positive-sentiment", 6, 1.0);
    add_class("negative-sentiment", 6, 1.0);
    add_class("risk", 6, 1.0);
    add_class("topic-tech", 4, 0.5);
    add_class("topic-energy", 4, 0.5);
    add_class("topic-health", 4, 0.5);
    add_class("temporal", 5, 0.25);
    add_class("quantitative", 5, 0.25);
    add_class("punctuation", 3, 0.1);
    add_class("neutral", size - next, 0.0);  // absorbs any extra room

    v.class_by_token_.assign(size, std::string());
    for (const auto& c : v.classes)
        for (Token t : c.tokens) v.class_by_token_[t] = c.name;
    return v;
}

const std::string& Vocabulary::class_name(Token t) const {
    static const std::string empty;
    if (t >= class_by_token_.size()) return empty;
    return class_by_token_[t];
}

const ConceptClass& Vocabulary::find_class(const std::string& name) const {
    for (const auto& c : classes)
        if (c.name == name) return c;
    throw std::invalid_argument("no concept class named " + name);
}

bool Vocabulary::is_alloc_bucket(Token t) const {
    return t >= alloc_buckets.front() && t <= alloc_buckets.back();
}

int Vocabulary::alloc_bucket_value(Token t) const {
    if (!is_alloc_bucket(t)) return -1;
    return static_cast<int>(t - alloc_buckets.front()) * 10;
}

// ---------------------------------------------------------------------------
// World generation
// ---------------------------------------------------------------------------

namespace {

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Oracle accuracy for a given signal level: the oracle calls sign(sentiment),
// the return is beta*sentiment + noise, sentiment ~ U(-1,1), so accuracy is
// the average of Phi(beta*|u|/vol) over u ~ U(0,1).
double oracle_accuracy_for_beta(double beta, double vol) {
    const int n = 400;
    double acc = 0.0;
    for (int i = 0; i <= n; ++i) {
        const double u = static_cast<double>(i) / n;
        const double w = (i == 0 || i == n) ? 0.5 : 1.0;
        acc += w * normal_cdf(beta * u / vol);
    }
    return acc / n;
}

double calibrate_beta(double target_accuracy, double vol) {
    if (target_accuracy <= 0.5) return 0.0;
    double lo = 0.0, hi = 50.0 * vol;
    for (int iter = 0; iter < 200; ++iter) {
        const double mid = 0.5 * (lo + hi);
        if (oracle_accuracy_for_beta(mid, vol) < target_accuracy) lo = mid;
        else hi = mid;
    }
    return 0.5 * (lo + hi);
}

Token draw_from_class(const ConceptClass& c, RngStream& rng) {
    return c.tokens[rng.next_below(c.tokens.size())];
}

// Token mixture for one news item given its latent sentiment and industry.
Token draw_news_token(const Vocabulary& vocab, double sentiment,
                      std::uint32_t industry, RngStream& rng) {
    const double u = rng.uniform01();
    if (u < 0.35) {
        const bool positive = rng.uniform01() < 0.5 * (1.0 + sentiment);
        return draw_from_class(
            vocab.find_class(positive ? "positive-sentiment" : "negative-sentiment"), rng);
    }
    if (u < 0.50) {
        static const char* kTopics[3] = {"topic-tech", "topic-energy", "topic-health"};
        return draw_from_class(vocab.find_class(kTopics[industry % 3]), rng);
    }
    if (u < 0.60) return draw_from_class(vocab.find_class("temporal"), rng);
    if (u < 0.70) return draw_from_class(vocab.find_class("quantitative"), rng);
    if (u < 0.80) return draw_from_class(vocab.find_class("punctuation"), rng);
    if (u < 0.85) return draw_from_class(vocab.find_class("risk"), rng);
    return draw_from_class(vocab.find_class("neutral"), rng);
}

Token draw_alloc_context_token(const Vocabulary& vocab, double risk_level,
                               RngStream& rng) {
    const double p_risk = 0.10 + 0.60 * risk_level;
    const double u = rng.uniform01();
    if (u < p_risk) return draw_from_class(vocab.find_class("risk"), rng);
    const double rest = (u - p_risk) / (1.0 - p_risk);
    if (rest < 0.45) return draw_from_class(vocab.find_class("neutral"), rng);
    if (rest < 0.65) return draw_from_class(vocab.find_class("topic-tech"), rng);
    if (rest < 0.85) return draw_from_class(vocab.find_class("quantitative"), rng);
    return draw_from_class(vocab.find_class("temporal"), rng);
}

}  // namespace

World generate_world(const WorldSpec& spec) {
    if (spec.num_firms < 2 || spec.num_days < 2)
        throw std::invalid_argument("world needs at least 2 firms and 2 days");
    if (spec.min_news_len < 2 || spec.max_news_len < spec.min_news_len)
        throw std::invalid_argument("bad news length range");

    World world;
    world.spec = spec;
    world.vocab = Vocabulary::standard(spec.vocab_size);

    RngStream rng = RngStream(spec.seed).split("world");
    world.truth.firm_industry.resize(spec.num_firms);
    for (std::size_t f = 0; f < spec.num_firms; ++f)
        world.truth.firm_industry[f] = static_cast<std::uint32_t>(f % 3);

    const double beta =
        calibrate_beta(spec.target_oracle_accuracy, spec.daily_noise_vol) *
        spec.signal_to_noise;

    // News per (firm, day); last `horizon` days carry no news so every item
    // has a tradable next return.
    const std::size_t horizon = static_cast<std::size_t>(spec.horizon);
    std::map<std::pair<std::uint32_t, std::uint32_t>, std::vector<std::size_t>> news_at;
    RngStream news_rng = rng.split("news");
    for (std::uint32_t day = 0; day + horizon < spec.num_days; ++day) {
        for (std::uint32_t firm = 0; firm < spec.num_firms; ++firm) {
            int count = news_rng.uniform01() < spec.news_per_firm_day ? 1 : 0;
            if (count == 1 && news_rng.uniform01() < 0.15) count = 2;  // occasional double
            for (int c = 0; c < count; ++c) {
                NewsItem item;
                item.id = world.news.size();
                item.firm = firm;
                item.day = day;
                const double sentiment = news_rng.uniform(-1.0, 1.0);
                const std::size_t len =
                    spec.min_news_len +
                    news_rng.next_below(spec.max_news_len - spec.min_news_len + 1);
                item.tokens.reserve(len);
                for (std::size_t i = 0; i < len; ++i)
                    item.tokens.push_back(draw_news_token(
                        world.vocab, sentiment, world.truth.firm_industry[firm], news_rng));
                news_at[{firm, day}].push_back(item.id);
                world.truth.latent_sentiments.push_back(sentiment);
                world.news.push_back(std::move(item));
            }
        }
    }

    world.panel.num_firms = spec.num_firms;
    world.panel.num_days = spec.num_days;
    world.panel.beta = beta;
    world.panel.noise_vol = spec.daily_noise_vol;
    world.panel.horizon = spec.horizon;
    world.panel.returns = num::Matrix(spec.num_firms, spec.num_days);
    RngStream ret_rng = rng.split("returns");
    for (std::uint32_t firm = 0; firm < spec.num_firms; ++firm) {
        for (std::uint32_t day = 0; day < spec.num_days; ++day) {
            double r = spec.daily_noise_vol * ret_rng.normal();
            if (day >= horizon) {
                auto it = news_at.find({firm, static_cast<std::uint32_t>(day - horizon)});
                if (it != news_at.end()) {
                    double mean_sent = 0.0;
                    for (std::size_t id : it->second)
                        mean_sent += world.truth.latent_sentiments[id];
                    mean_sent /= static_cast<double>(it->second.size());
                    r += beta * mean_sent;
                }
            }
            world.panel.returns.at(firm, day) = r;
        }
    }
    return world;
}

std::optional<double> ReturnPanel::tradable_return(const NewsItem& item) const {
    const std::size_t day = item.day + static_cast<std::size_t>(horizon);
    if (day >= num_days) return std::nullopt;
    return returns.at(item.firm, day);
}

Classification oracle_classifier(const GroundTruth& truth, const NewsItem& item) {
    return truth.latent_sentiments.at(item.id) >= 0.0 ? Classification::Positive
                                                      : Classification::Negative;
}

double classification_accuracy(const World& world,
                               const std::vector<Classification>& labels) {
    if (labels.size() != world.news.size())
        throw std::invalid_argument("one label per news item required");
    std::size_t n = 0, correct = 0;
    for (std::size_t i = 0; i < world.news.size(); ++i) {
        const auto ret = world.panel.tradable_return(world.news[i]);
        if (!ret) continue;
        ++n;
        const bool up = *ret >= 0.0;
        if (up == (labels[i] == Classification::Positive)) ++correct;
    }
    if (n == 0) return 0.0;
    return static_cast<double>(correct) / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// LM corpus
// ---------------------------------------------------------------------------

TokenSeq make_classification_prompt(const Vocabulary& vocab, const NewsItem& item) {
    TokenSeq seq;
    seq.reserve(item.tokens.size() + 2);
    seq.push_back(vocab.bos);
    seq.insert(seq.end(), item.tokens.begin(), item.tokens.end());
    seq.push_back(vocab.classify_query);
    return seq;
}

TrainingCorpus build_lm_corpus(const World& world, double allocation_fraction) {
    TrainingCorpus corpus;
    const Vocabulary& vocab = world.vocab;
    RngStream label_rng = RngStream(world.spec.seed).split("labels");

    corpus.news_sequence.assign(world.news.size(), -1);
    for (const NewsItem& item : world.news) {
        const double sentiment = world.truth.latent_sentiments[item.id];
        Token answer;
        if (std::abs(sentiment) > world.spec.ambiguity_threshold) {
            answer = sentiment >= 0.0 ? vocab.answer_positive : vocab.answer_negative;
        } else {
            answer = label_rng.uniform01() < world.spec.optimism_bias
                         ? vocab.answer_positive
                         : vocab.answer_negative;
        }
        TokenSeq seq = make_classification_prompt(vocab, item);
        seq.push_back(answer);
        corpus.news_sequence[item.id] = static_cast<std::ptrdiff_t>(corpus.sequences.size());
        corpus.sequences.push_back(std::move(seq));
    }

    const std::size_t n_alloc = static_cast<std::size_t>(
        std::llround(allocation_fraction * static_cast<double>(world.news.size())));
    RngStream alloc_rng = RngStream(world.spec.seed).split("alloc-corpus");
    for (std::size_t i = 0; i < n_alloc; ++i) {
        const double risk = alloc_rng.uniform01();
        const std::size_t len = 8 + alloc_rng.next_below(7);
        TokenSeq seq;
        seq.push_back(vocab.bos);
        for (std::size_t t = 0; t < len; ++t)
            seq.push_back(draw_alloc_context_token(vocab, risk, alloc_rng));
        seq.push_back(vocab.alloc_query);
        double alloc = 0.85 - 0.70 * risk + 0.08 * alloc_rng.normal();
        alloc = std::clamp(alloc, 0.0, 1.0);
        const std::size_t bucket = static_cast<std::size_t>(std::llround(alloc * 10.0));
        seq.push_back(vocab.alloc_buckets[bucket]);
        corpus.sequences.push_back(std::move(seq));
    }
    return corpus;
}

TokenSeq make_allocation_prompt(const Vocabulary& vocab, std::uint64_t seed,
                                double risk_level) {
    RngStream rng = RngStream(seed).split("alloc-prompt");
    TokenSeq seq;
    seq.push_back(vocab.bos);
    for (int i = 0; i < 10; ++i)
        seq.push_back(draw_alloc_context_token(vocab, risk_level, rng));
    seq.push_back(vocab.alloc_query);
    return seq;
}

// ---------------------------------------------------------------------------
// Direct sparse-dictionary generator
// ---------------------------------------------------------------------------

ResidualSample generate_residual_dataset(const ResidualGenSpec& spec, std::size_t size) {
    if (size < 1) throw std::invalid_argument("need at least one sample");
    if (spec.expected_active <= 0.0 || spec.expected_active > double(spec.num_components))
        throw std::invalid_argument("expected_active out of range");

    RngStream rng = RngStream(spec.seed).split("residual-gen");
    ResidualSample sample;
    sample.truth.dictionary = num::Matrix(spec.dim, spec.num_components);
    for (std::size_t j = 0; j < spec.num_components; ++j) {
        double norm_sq = 0.0;
        for (std::size_t i = 0; i < spec.dim; ++i) {
            const double v = rng.normal();
            sample.truth.dictionary.at(i, j) = v;
            norm_sq += v * v;
        }
        const double inv = 1.0 / std::sqrt(norm_sq);
        for (std::size_t i = 0; i < spec.dim; ++i)
            sample.truth.dictionary.at(i, j) *= inv;
    }

    const double p_active = spec.expected_active / double(spec.num_components);
    sample.vectors = num::Matrix(size, spec.dim);
    sample.codes = num::Matrix(size, spec.num_components);
    for (std::size_t s = 0; s < size; ++s) {
        for (std::size_t j = 0; j < spec.num_components; ++j) {
            if (rng.uniform01() < p_active)
                sample.codes.at(s, j) = rng.uniform(0.5, 1.5);
        }
        for (std::size_t i = 0; i < spec.dim; ++i) {
            double v = spec.noise_scale == 0.0 ? 0.0 : spec.noise_scale * rng.normal();
            for (std::size_t j = 0; j < spec.num_components; ++j) {
                const double c = sample.codes.at(s, j);
                if (c != 0.0) v += sample.truth.dictionary.at(i, j) * c;
            }
            sample.vectors.at(s, i) = v;
        }
    }
    return sample;
}

// ---------------------------------------------------------------------------
// Export / load
// ---------------------------------------------------------------------------

namespace {

json spec_to_json(const WorldSpec& s) {
    return json{{"num_firms", s.num_firms},
                {"num_days", s.num_days},
                {"news_per_firm_day", s.news_per_firm_day},
                {"min_news_len", s.min_news_len},
                {"max_news_len", s.max_news_len},
                {"signal_to_noise", s.signal_to_noise},
                {"target_oracle_accuracy", s.target_oracle_accuracy},
                {"daily_noise_vol", s.daily_noise_vol},
                {"horizon", s.horizon},
                {"optimism_bias", s.optimism_bias},
                {"ambiguity_threshold", s.ambiguity_threshold},
                {"vocab_size", s.vocab_size},
                {"seed", s.seed}};
}

WorldSpec spec_from_json(const json& j) {
    WorldSpec s;
    s.num_firms = j.at("num_firms").get<std::size_t>();
    s.num_days = j.at("num_days").get<std::size_t>();
    s.news_per_firm_day = j.at("news_per_firm_day").get<double>();
    s.min_news_len = j.at("min_news_len").get<std::size_t>();
    s.max_news_len = j.at("max_news_len").get<std::size_t>();
    s.signal_to_noise = j.at("signal_to_noise").get<double>();
    s.target_oracle_accuracy = j.at("target_oracle_accuracy").get<double>();
    s.daily_noise_vol = j.at("daily_noise_vol").get<double>();
    s.horizon = j.at("horizon").get<int>();
    s.optimism_bias = j.at("optimism_bias").get<double>();
    s.ambiguity_threshold = j.at("ambiguity_threshold").get<double>();
    s.vocab_size = j.at("vocab_size").get<std::uint32_t>();
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
}

}  // namespace

void export_world(const World& world, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);

    std::string news_lines;
    for (const NewsItem& item : world.news) {
        json j{{"id", item.id}, {"firm", item.firm}, {"day", item.day},
               {"tokens", item.tokens}};
        news_lines += j.dump();
        news_lines += '\n';
    }
    io::atomic_write(dir / "news.jsonl", news_lines);

    io::CsvWriter returns({"firm", "day", "ret"});
    char buf[40];
    for (std::size_t f = 0; f < world.panel.num_firms; ++f) {
        for (std::size_t d = 0; d < world.panel.num_days; ++d) {
            std::snprintf(buf, sizeof(buf), "%.17g", world.panel.returns.at(f, d));
            returns.add_row({std::to_string(f), std::to_string(d), buf});
        }
    }
    returns.write(dir / "returns.csv");

    std::string truth_lines;
    json meta{{"type", "meta"},
              {"spec", spec_to_json(world.spec)},
              {"beta", world.panel.beta},
              {"firm_industry", world.truth.firm_industry}};
    truth_lines += meta.dump();
    truth_lines += '\n';
    for (const NewsItem& item : world.news) {
        json j{{"type", "news"},
               {"id", item.id},
               {"latent_sentiment", world.truth.latent_sentiments[item.id]}};
        truth_lines += j.dump();
        truth_lines += '\n';
    }
    io::atomic_write(dir / "truth.jsonl", truth_lines);
}

World load_world(const std::filesystem::path& dir) {
    World world;

    std::istringstream truth_in(io::read_file(dir / "truth.jsonl"));
    std::string line;
    bool have_meta = false;
    std::vector<std::pair<std::uint64_t, double>> sentiments;
    while (std::getline(truth_in, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        if (j.at("type") == "meta") {
            world.spec = spec_from_json(j.at("spec"));
            world.panel.beta = j.at("beta").get<double>();
            world.truth.firm_industry =
                j.at("firm_industry").get<std::vector<std::uint32_t>>();
            have_meta = true;
        } else {
            sentiments.emplace_back(j.at("id").get<std::uint64_t>(),
                                    j.at("latent_sentiment").get<double>());
        }
    }
    if (!have_meta) throw std::runtime_error("truth.jsonl has no meta record");
    world.vocab = Vocabulary::standard(world.spec.vocab_size);

    std::istringstream news_in(io::read_file(dir / "news.jsonl"));
    while (std::getline(news_in, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        NewsItem item;
        item.id = j.at("id").get<std::uint64_t>();
        item.firm = j.at("firm").get<std::uint32_t>();
        item.day = j.at("day").get<std::uint32_t>();
        item.tokens = j.at("tokens").get<TokenSeq>();
        world.news.push_back(std::move(item));
    }

    world.truth.latent_sentiments.assign(world.news.size(), 0.0);
    for (const auto& [id, s] : sentiments) {
        if (id >= world.truth.latent_sentiments.size())
            throw std::runtime_error("truth.jsonl references unknown news id");
        world.truth.latent_sentiments[id] = s;
    }

    const io::CsvTable table = io::read_csv(dir / "returns.csv");
    world.panel.num_firms = world.spec.num_firms;
    world.panel.num_days = world.spec.num_days;
    world.panel.noise_vol = world.spec.daily_noise_vol;
    world.panel.horizon = world.spec.horizon;
    world.panel.returns = num::Matrix(world.spec.num_firms, world.spec.num_days);
    const std::size_t fc = table.column("firm"), dc = table.column("day"),
                      rc = table.column("ret");
    for (const auto& row : table.rows) {
        const std::size_t f = std::stoull(row[fc]);
        const std::size_t d = std::stoull(row[dc]);
        world.panel.returns.at(f, d) = std::stod(row[rc]);
    }
    return world;
}

}  // namespace saefin::datasim
