#include "labeling.hpp"

#include <algorithm>
#include <map>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "io_util.hpp"
#include "parallel.hpp"

namespace saefin::labeling {

using json = nlohmann::ordered_json;

namespace {
constexpr std::size_t kWindow = 4;

datasim::TokenSeq context_window(const datasim::TokenSeq& tokens, std::size_t pos) {
    const std::size_t lo = pos >= kWindow ? pos - kWindow : 0;
    const std::size_t hi = std::min(tokens.size(), pos + kWindow + 1);
    return datasim::TokenSeq(tokens.begin() + lo, tokens.begin() + hi);
}

std::string token_class_or_control(const datasim::Vocabulary& vocab,
                                   datasim::Token token) {
    const std::string& name = vocab.class_name(token);
    return name.empty() ? std::string("control") : name;
}

}  // namespace

std::vector<ActivationRecord> top_activations(const sae::Sae& sae,
                                              const lm::ResidualDataset& dataset,
                                              const std::vector<datasim::TokenSeq>& corpus,
                                              std::size_t feature, std::size_t n) {
    if (feature >= sae.config.latent_dim)
        throw std::invalid_argument("feature index out of range");
    if (n < 1) throw std::invalid_argument("n must be >= 1");
    if (dataset.dim() != sae.config.input_dim)
        throw std::invalid_argument("dataset width does not match the autoencoder");

    const std::size_t d = sae.config.input_dim;
    const double* w_row = sae.encoder_weight.data() + feature * d;
    const double bias = sae.encoder_bias[feature];

    std::vector<ActivationRecord> firing;
    for (std::size_t r = 0; r < dataset.count(); ++r) {
        double pre = bias;
        const double* x = dataset.vectors.data() + r * d;
        for (std::size_t i = 0; i < d; ++i) pre += w_row[i] * x[i];
        if (pre <= 0.0) continue;
        const auto& prov = dataset.provenance[r];
        ActivationRecord rec;
        rec.feature = feature;
        rec.activation = pre;
        rec.sequence = prov.sequence;
        rec.position = prov.position;
        const datasim::TokenSeq& tokens = corpus.at(prov.sequence);
        rec.token = tokens.at(prov.position);
        rec.window = context_window(tokens, prov.position);
        firing.push_back(std::move(rec));
    }
    std::sort(firing.begin(), firing.end(),
              [](const ActivationRecord& a, const ActivationRecord& b) {
                  if (a.activation != b.activation) return a.activation > b.activation;
                  if (a.sequence != b.sequence) return a.sequence < b.sequence;
                  return a.position < b.position;
              });
    if (firing.size() > n) firing.resize(n);
    return firing;
}

FeatureDossier build_dossier(std::size_t feature,
                             std::vector<ActivationRecord> records,
                             const datasim::Vocabulary& vocab) {
    for (const auto& r : records) {
        if (r.feature != feature)
            throw std::invalid_argument("records mix features " +
                                        std::to_string(r.feature) + " and " +
                                        std::to_string(feature));
    }
    FeatureDossier dossier;
    dossier.feature = feature;
    dossier.records = std::move(records);
    dossier.source = LabelSource::Template;
    if (dossier.records.empty()) {
        dossier.label = "dead-feature";
        return dossier;
    }

    std::map<std::string, std::size_t> counts;
    for (const auto& r : dossier.records)
        counts[token_class_or_control(vocab, r.token)] += 1;
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    const double share =
        static_cast<double>(ranked.front().second) / static_cast<double>(dossier.records.size());
    if (share >= 0.6) {
        dossier.label = "tokens of class " + ranked.front().first;
    } else if (ranked.size() == 1) {
        dossier.label = "tokens of class " + ranked.front().first;
    } else {
        dossier.label = "mixed: " + ranked[0].first + ", " + ranked[1].first;
    }
    return dossier;
}

double dossier_purity(const FeatureDossier& dossier, const datasim::Vocabulary& vocab) {
    if (dossier.records.empty()) return 0.0;
    std::map<std::string, std::size_t> counts;
    for (const auto& r : dossier.records)
        counts[token_class_or_control(vocab, r.token)] += 1;
    std::size_t modal = 0;
    for (const auto& [name, c] : counts) modal = std::max(modal, c);
    return static_cast<double>(modal) / static_cast<double>(dossier.records.size());
}

std::vector<FeatureDossier> build_all_dossiers(const sae::Sae& sae,
                                               const lm::ResidualDataset& dataset,
                                               const std::vector<datasim::TokenSeq>& corpus,
                                               const datasim::Vocabulary& vocab,
                                               std::size_t n) {
    std::vector<FeatureDossier> dossiers(sae.config.latent_dim);
    parallel_for(sae.config.latent_dim, [&](std::size_t j) {
        dossiers[j] = build_dossier(j, top_activations(sae, dataset, corpus, j, n), vocab);
    });
    return dossiers;
}

void apply_label_overrides(std::vector<FeatureDossier>& dossiers,
                           const std::filesystem::path& overrides_json) {
    const json overrides = json::parse(io::read_file(overrides_json));
    if (!overrides.is_object())
        throw std::runtime_error("label override file must be a JSON object");
    for (const auto& [key, value] : overrides.items()) {
        const std::size_t feature = std::stoull(key);
        if (feature >= dossiers.size())
            throw std::runtime_error("label override for unknown feature " + key);
        dossiers[feature].label = value.get<std::string>();
        dossiers[feature].source = LabelSource::Manual;
    }
}

namespace {

const char* source_name(LabelSource s) {
    switch (s) {
        case LabelSource::Template: return "template";
        case LabelSource::GroundTruth: return "ground-truth";
        case LabelSource::Manual: return "manual";
    }
    return "template";
}

LabelSource source_from(const std::string& s) {
    if (s == "manual") return LabelSource::Manual;
    if (s == "ground-truth") return LabelSource::GroundTruth;
    return LabelSource::Template;
}

}  // namespace

void export_dossiers(const std::vector<FeatureDossier>& dossiers,
                     const std::filesystem::path& path) {
    std::string lines;
    for (const auto& d : dossiers) {
        json records = json::array();
        for (const auto& r : d.records) {
            records.push_back(json{{"activation", r.activation},
                                   {"sequence", r.sequence},
                                   {"position", r.position},
                                   {"token", r.token},
                                   {"window", r.window}});
        }
        json j{{"feature", d.feature},
               {"label", d.label},
               {"source", source_name(d.source)},
               {"records", records}};
        lines += j.dump();
        lines += '\n';
    }
    io::atomic_write(path, lines);
}

std::vector<FeatureDossier> load_dossiers(const std::filesystem::path& path) {
    std::vector<FeatureDossier> dossiers;
    std::istringstream in(io::read_file(path));
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        FeatureDossier d;
        d.feature = j.at("feature").get<std::size_t>();
        d.label = j.at("label").get<std::string>();
        d.source = source_from(j.at("source").get<std::string>());
        for (const auto& rj : j.at("records")) {
            ActivationRecord r;
            r.feature = d.feature;
            r.activation = rj.at("activation").get<double>();
            r.sequence = rj.at("sequence").get<std::uint64_t>();
            r.position = rj.at("position").get<std::uint32_t>();
            r.token = rj.at("token").get<datasim::Token>();
            r.window = rj.at("window").get<datasim::TokenSeq>();
            d.records.push_back(std::move(r));
        }
        dossiers.push_back(std::move(d));
    }
    return dossiers;
}

}  // namespace saefin::labeling
