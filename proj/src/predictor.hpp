// Rolling-window logistic return prediction from news embeddings, and
// long-short dollar-neutral portfolio construction from predictions or from
// steered classifications.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "datasim.hpp"
#include "featselect.hpp"
#include "numerics.hpp"

namespace saefin::predictor {

struct RollingConfig {
    std::size_t train_days = 200;
    std::size_t validation_days = 50;
    std::size_t refit_every = 50;
    double quantile = 0.20;    // long/short leg fraction
    std::size_t min_names = 3; // per leg; production schema uses 10
    std::size_t num_pcs = 64;  // ranking compression inside each window
    std::size_t feature_budget = 300;
};

struct NewsRow {
    std::uint64_t news_id = 0;
    std::uint32_t firm = 0;
    std::uint32_t day = 0;
};

struct FittedWindow {
    featselect::LogisticModel model;       // on standardized selected features
    std::vector<std::size_t> features;     // selected ids, ranking order
    std::vector<double> means, stds;       // train-window standardization
    std::uint32_t train_begin = 0, train_end = 0;  // [begin, end)
    std::uint32_t valid_end = 0;                   // validation is [train_end, valid_end)
    std::uint32_t cover_begin = 0, cover_end = 0;  // days this model serves
    bool skipped = false;
    std::string skip_reason;
};

// One window per refit period; ranking and selection are re-estimated inside
// each window so nothing after the window's end can leak in. An optional
// feature restriction confines the universe (used by the attribution table).
std::vector<FittedWindow> fit_rolling(const RollingConfig& config,
                                      const num::Matrix& embeddings,
                                      const std::vector<NewsRow>& rows,
                                      const std::vector<int>& labels,
                                      const std::vector<std::size_t>* allowed_features
                                      = nullptr);

struct PredictionRecord {
    std::uint64_t news_id = 0;
    std::uint32_t firm = 0;
    std::uint32_t day = 0;
    double probability = 0.5;
};

struct PredictOutcome {
    std::vector<PredictionRecord> records;  // out-of-sample only
    std::size_t excluded_before_coverage = 0;
};

// Scores each row with the latest fitted window covering its day; rows before
// the first coverage are excluded and counted.
PredictOutcome predict(const std::vector<FittedWindow>& windows,
                       const num::Matrix& embeddings,
                       const std::vector<NewsRow>& rows);

struct PortfolioDay {
    std::uint32_t day = 0;
    std::vector<std::uint32_t> long_names, short_names;  // equal weight per leg
    double ret = 0.0;  // mean long next return minus mean short next return
    bool skipped = false;
    std::string reason;
};

// Quantile long-short portfolios from averaged per-firm probabilities.
std::vector<PortfolioDay> build_portfolios(const std::vector<PredictionRecord>& records,
                                           const datasim::ReturnPanel& panel,
                                           const RollingConfig& config);

// Long the firms classified Positive, short the Negative ones. Firms whose
// same-day classifications tie exactly are left out of both legs.
std::vector<PortfolioDay> classification_portfolio(
    const std::vector<datasim::Classification>& classifications,
    const std::vector<NewsRow>& rows, const datasim::ReturnPanel& panel,
    const RollingConfig& config);

// Realized daily returns of the non-skipped days, in day order.
std::vector<double> realized_returns(const std::vector<PortfolioDay>& days);

struct AccuracySummary {
    double average_daily = 0.0;  // mean over days of within-day accuracy
    double total = 0.0;          // pooled over all scored news
    std::size_t n_days = 0;
    std::size_t n_records = 0;
};

// Sign-prediction accuracy of records against realized tradable returns.
AccuracySummary prediction_accuracy(const std::vector<PredictionRecord>& records,
                                    const datasim::ReturnPanel& panel);

// news_id,firm,day,prob
void write_predictions_csv(const std::vector<PredictionRecord>& records,
                           const std::filesystem::path& path);
// day,n_long,n_short,ret,skipped,reason
void write_portfolio_csv(const std::vector<PortfolioDay>& days,
                         const std::filesystem::path& path);

}  // namespace saefin::predictor
