// Ranks sparse features by predictive relevance: logistic regression on
// principal-component scores, coefficients propagated back to feature space,
// features kept by absolute back-projected weight.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "datasim.hpp"
#include "numerics.hpp"
#include "sae.hpp"
#include "tinylm.hpp"

namespace saefin::featselect {

enum class Pooling { Mean, Max };

// Sparse feature vector for one news item: per-position codes at the tap,
// pooled over the news-token positions of the classification prompt.
std::vector<double> embed_news(const lm::TinyLm& model, const sae::Sae& sae,
                               const datasim::Vocabulary& vocab,
                               const datasim::NewsItem& item, lm::TapPoint tap,
                               Pooling pooling = Pooling::Mean);

// All news items, rows in corpus order.
num::Matrix embed_all_news(const lm::TinyLm& model, const sae::Sae& sae,
                           const datasim::World& world, lm::TapPoint tap,
                           Pooling pooling = Pooling::Mean);

// ---------------------------------------------------------------------------
// Logistic regression (shared with the rolling predictor)
// ---------------------------------------------------------------------------

struct LogisticModel {
    std::vector<double> weights;
    double intercept = 0.0;
    bool converged = false;
    std::size_t iterations = 0;
};

struct LogisticOptions {
    double ridge = 1e-4;
    double learning_rate = 0.05;
    double gradient_tolerance = 1e-6;
    std::size_t max_iterations = 4000;
    // Early stopping: when validation data is present the best-validation
    // iterate is kept (checked every `check_every` iterations).
    const num::Matrix* validation_x = nullptr;
    const std::vector<int>* validation_y = nullptr;
    std::size_t check_every = 25;
    std::size_t patience = 8;
};

LogisticModel fit_logistic(const num::Matrix& x, const std::vector<int>& y,
                           const LogisticOptions& options = {});

double predict_probability(const LogisticModel& model, const double* x, std::size_t n);

// ---------------------------------------------------------------------------
// Ranking
// ---------------------------------------------------------------------------

struct FeatureRanking {
    std::vector<double> importance;   // per feature; constants get 0
    std::vector<std::size_t> order;   // all features, importance desc, ties by id
    std::string window_id;
    bool converged = true;
    // Standardization used before PCA (constant features dropped).
    std::vector<double> means, stds;
    std::vector<bool> kept;
};

// Fit logistic regression on the first `num_pcs` principal components of the
// standardized embeddings, then back-project coefficients to feature space.
FeatureRanking rank_features(const num::Matrix& embeddings,
                             const std::vector<int>& labels, std::size_t num_pcs,
                             const std::string& window_id = "");

struct ReducedEmbedding {
    std::vector<std::size_t> feature_ids;  // top-k by importance
    bool clamped = false;                  // k exceeded the available features
};

ReducedEmbedding select_top_k(const FeatureRanking& ranking, std::size_t k);

// feature_id,importance,rank
void write_ranking_csv(const FeatureRanking& ranking, const std::filesystem::path& path);

}  // namespace saefin::featselect
