// Portfolio statistics and attribution: annualized Sharpe ratios, the
// Jobson-Korkie test with the Memmel variance correction, robust alpha
// regression, k-means clustering of feature labels with silhouette model
// selection, cluster merge maps, and leave-one-group-out Sharpe attribution.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "numerics.hpp"

namespace saefin::stats {

inline constexpr double kTradingDaysPerYear = 252.0;

struct SharpeReport {
    double mean_daily = 0.0;
    double daily_vol = 0.0;  // population standard deviation
    std::optional<double> annualized;  // missing when the volatility is zero
    std::size_t observations = 0;
};

SharpeReport annualized_sharpe(const std::vector<double>& daily_returns);

enum class Alternative { TwoSided, Less, Greater };

struct JkMemmelResult {
    double sharpe_diff = 0.0;  // per-period SR_a - SR_b
    double z = 0.0;
    double p_value = 1.0;
    double correlation = 0.0;
    std::size_t sample_size = 0;
    bool low_sample = false;  // fewer than 30 paired observations
};

// z = (SR_a - SR_b) / sqrt(theta) with
// theta = (1/T) [2(1 - rho) + (SR_a^2 + SR_b^2)/2 - SR_a SR_b rho^2],
// Sharpe ratios in per-period units, p-value from the standard normal.
JkMemmelResult jk_memmel_test(const std::vector<double>& returns_a,
                              const std::vector<double>& returns_b,
                              Alternative alternative = Alternative::TwoSided);

// Conventional stars: *** p<0.01, ** p<0.05, * p<0.1, blank otherwise.
std::string significance_stars(double p_value);

struct AlphaRegressionResult {
    double alpha_daily = 0.0;
    double alpha_annualized = 0.0;  // daily intercept x 252
    double beta = 0.0;
    double alpha_se = 0.0, beta_se = 0.0;  // heteroskedasticity-robust (HC1)
    double alpha_t = 0.0, beta_t = 0.0;
    double r_squared = 0.0;
    std::size_t observations = 0;
};

AlphaRegressionResult alpha_regression(const std::vector<double>& dependent,
                                       const std::vector<double>& benchmark);

// ---------------------------------------------------------------------------
// Label clustering
// ---------------------------------------------------------------------------

// Deterministic bag-of-tokens hashing embedding of a text label (signed
// feature hashing, L2 normalized).
std::vector<double> label_embedding(const std::string& label, std::size_t dim = 64);
num::Matrix embed_labels(const std::vector<std::string>& labels, std::size_t dim = 64);

struct KMeansResult {
    num::Matrix centroids;  // k x d
    std::vector<std::size_t> assignment;
    double inertia = 0.0;
    bool degenerate = false;  // an empty cluster appeared
};

KMeansResult kmeans(const num::Matrix& points, std::size_t k, std::uint64_t seed,
                    std::size_t restarts = 10, std::size_t max_iterations = 300);

double mean_silhouette(const num::Matrix& points,
                       const std::vector<std::size_t>& assignment, std::size_t k);

struct ClusterAssignment {
    std::vector<std::size_t> cluster_of;  // raw cluster per row
    num::Matrix centroids;
    std::size_t chosen_k = 0;
    double silhouette = 0.0;
    bool degenerate_warning = false;
    std::vector<std::string> group_of;  // filled by apply_merge_map
};

// Best K in [k_min, k_max] by mean silhouette (k-means++ with restarts).
ClusterAssignment cluster_labels(const num::Matrix& embeddings, std::size_t k_min,
                                 std::size_t k_max, std::uint64_t seed);

// JSON object {"raw_cluster_id": "group name"}; must cover every raw cluster
// and nothing else.
std::map<std::size_t, std::string> load_merge_map(const std::filesystem::path& path);
void apply_merge_map(ClusterAssignment& assignment,
                     const std::map<std::size_t, std::string>& merge_map);

// ---------------------------------------------------------------------------
// Leave-one-group-out attribution
// ---------------------------------------------------------------------------

struct PipelineOutcome {
    std::vector<double> returns;      // realized daily long-short returns
    std::vector<std::uint32_t> days;  // aligned with returns (for pairing)
    double average_daily_accuracy = 0.0;
    double total_accuracy = 0.0;
};

// Restrict two day-stamped return series to their common days, in day order.
void pair_by_day(const std::vector<double>& returns_a,
                 const std::vector<std::uint32_t>& days_a,
                 const std::vector<double>& returns_b,
                 const std::vector<std::uint32_t>& days_b,
                 std::vector<double>& paired_a, std::vector<double>& paired_b);

// Runs the prediction pipeline restricted to a feature subset.
using PipelineRunner = std::function<PipelineOutcome(const std::vector<std::size_t>&)>;

struct ShapleyRow {
    std::string group;
    std::optional<double> shapley_sharpe;     // SR_full - SR_without_group
    std::optional<double> individual_sharpe;  // group-only model
    double average_daily_accuracy = 0.0;      // of the group-only model
    double total_accuracy = 0.0;
    std::size_t n_features = 0;
    std::string significance;  // of without-group vs full
    bool empty_group = false;
};

struct ShapleyTable {
    std::vector<ShapleyRow> rows;  // sorted by shapley sharpe, descending
    double full_sharpe = 0.0;
    double full_average_daily_accuracy = 0.0;
    double full_total_accuracy = 0.0;
};

ShapleyTable shapley_sharpe_table(const PipelineRunner& runner,
                                  const std::map<std::string, std::vector<std::size_t>>& groups,
                                  const std::vector<std::size_t>& all_features);

// group,shapley_sharpe,individual_sharpe,accuracy,n_features,significance
void write_shapley_csv(const ShapleyTable& table, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Small helpers shared by experiments
// ---------------------------------------------------------------------------

double normal_cdf(double x);
// Spearman rank correlation with average ranks on ties.
double spearman_rho(const std::vector<double>& x, const std::vector<double>& y);
// Two-sided p-value via the t approximation for H0: rho = 0.
double spearman_p_value(double rho, std::size_t n);
// Student-t distribution upper tail, used by the Spearman test.
double student_t_cdf(double t, double dof);

}  // namespace saefin::stats
