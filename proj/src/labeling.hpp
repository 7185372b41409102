// Assigns human-readable meaning to autoencoder features by tracing the
// contexts in which they fire hardest. Labels at this scale come from the
// synthetic world's known token classes via a majority template; a manual
// override file can replace any of them.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "datasim.hpp"
#include "sae.hpp"
#include "tinylm.hpp"

namespace saefin::labeling {

struct ActivationRecord {
    std::size_t feature = 0;
    double activation = 0.0;       // strictly positive
    std::uint64_t sequence = 0;
    std::uint32_t position = 0;
    datasim::Token token = 0;      // token at the position
    datasim::TokenSeq window;      // +/- 4 tokens of context
};

enum class LabelSource { Template, GroundTruth, Manual };

struct FeatureDossier {
    std::size_t feature = 0;
    std::vector<ActivationRecord> records;  // descending activation
    std::string label;
    LabelSource source = LabelSource::Template;
};

// The n records with the largest activation of `feature` over the dataset;
// ties break by (sequence, position) ascending. Features that never fire
// return an empty list.
std::vector<ActivationRecord> top_activations(const sae::Sae& sae,
                                              const lm::ResidualDataset& dataset,
                                              const std::vector<datasim::TokenSeq>& corpus,
                                              std::size_t feature, std::size_t n);

// Majority template rule: >= 60% of records from one token class gives
// "tokens of class X"; otherwise "mixed: A, B" with the top two classes;
// no records at all gives "dead-feature".
FeatureDossier build_dossier(std::size_t feature,
                             std::vector<ActivationRecord> records,
                             const datasim::Vocabulary& vocab);

// Fraction of records whose provenance token belongs to the dossier's modal
// class. Zero for empty dossiers.
double dossier_purity(const FeatureDossier& dossier, const datasim::Vocabulary& vocab);

// Dossiers for every feature, top-n default 20.
std::vector<FeatureDossier> build_all_dossiers(const sae::Sae& sae,
                                               const lm::ResidualDataset& dataset,
                                               const std::vector<datasim::TokenSeq>& corpus,
                                               const datasim::Vocabulary& vocab,
                                               std::size_t n = 20);

// JSON map {"feature_id": "label"}; unknown ids rejected.
void apply_label_overrides(std::vector<FeatureDossier>& dossiers,
                           const std::filesystem::path& overrides_json);

// JSON lines, one dossier per feature.
void export_dossiers(const std::vector<FeatureDossier>& dossiers,
                     const std::filesystem::path& path);
std::vector<FeatureDossier> load_dossiers(const std::filesystem::path& path);

}  // namespace saefin::labeling
