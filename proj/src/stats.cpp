#include "stats.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "io_util.hpp"
#include "parallel.hpp"

namespace saefin::stats {

using num::Matrix;
using num::RngStream;

namespace {

double mean_of(const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x;
    return m / static_cast<double>(v.size());
}

double population_sd(const std::vector<double>& v, double mean) {
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    return std::sqrt(var / static_cast<double>(v.size()));
}

}  // namespace

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

SharpeReport annualized_sharpe(const std::vector<double>& daily_returns) {
    if (daily_returns.size() < 2)
        throw std::invalid_argument("sharpe needs at least two observations");
    SharpeReport r;
    r.observations = daily_returns.size();
    r.mean_daily = mean_of(daily_returns);
    r.daily_vol = population_sd(daily_returns, r.mean_daily);
    if (r.daily_vol > 0.0)
        r.annualized = std::sqrt(kTradingDaysPerYear) * r.mean_daily / r.daily_vol;
    return r;
}

JkMemmelResult jk_memmel_test(const std::vector<double>& returns_a,
                              const std::vector<double>& returns_b,
                              Alternative alternative) {
    if (returns_a.size() != returns_b.size())
        throw std::invalid_argument("paired series must have equal length");
    const std::size_t t = returns_a.size();
    if (t < 2) throw std::invalid_argument("need at least two paired observations");

    JkMemmelResult result;
    result.sample_size = t;
    result.low_sample = t < 30;

    const double mean_a = mean_of(returns_a), mean_b = mean_of(returns_b);
    const double sd_a = population_sd(returns_a, mean_a);
    const double sd_b = population_sd(returns_b, mean_b);
    if (sd_a == 0.0 || sd_b == 0.0)
        throw std::invalid_argument("sharpe difference undefined for zero-variance series");
    const double sr_a = mean_a / sd_a, sr_b = mean_b / sd_b;

    double cov = 0.0;
    for (std::size_t i = 0; i < t; ++i)
        cov += (returns_a[i] - mean_a) * (returns_b[i] - mean_b);
    cov /= static_cast<double>(t);
    result.correlation = cov / (sd_a * sd_b);
    const double rho = result.correlation;

    result.sharpe_diff = sr_a - sr_b;
    const double theta = (2.0 * (1.0 - rho) + 0.5 * (sr_a * sr_a + sr_b * sr_b) -
                          sr_a * sr_b * rho * rho) /
                         static_cast<double>(t);
    if (result.sharpe_diff == 0.0) {
        result.z = 0.0;  // identical Sharpe ratios; theta may be 0 too
    } else if (theta <= 0.0) {
        result.z = result.sharpe_diff > 0.0 ? 1e308 : -1e308;
    } else {
        result.z = result.sharpe_diff / std::sqrt(theta);
    }

    switch (alternative) {
        case Alternative::TwoSided:
            result.p_value = 2.0 * (1.0 - normal_cdf(std::abs(result.z)));
            break;
        case Alternative::Less:  // H1: SR_a < SR_b
            result.p_value = normal_cdf(result.z);
            break;
        case Alternative::Greater:  // H1: SR_a > SR_b
            result.p_value = 1.0 - normal_cdf(result.z);
            break;
    }
    return result;
}

std::string significance_stars(double p) {
    if (p < 0.01) return "***";
    if (p < 0.05) return "**";
    if (p < 0.1) return "*";
    return "";
}

AlphaRegressionResult alpha_regression(const std::vector<double>& dependent,
                                       const std::vector<double>& benchmark) {
    if (dependent.size() != benchmark.size())
        throw std::invalid_argument("paired series must have equal length");
    const std::size_t t = dependent.size();
    if (t < 3) throw std::invalid_argument("need at least three paired observations");

    const double mean_x = mean_of(benchmark);
    double sxx = 0.0;
    for (double x : benchmark) sxx += (x - mean_x) * (x - mean_x);
    if (sxx == 0.0) throw std::invalid_argument("benchmark has zero variance");

    const double mean_y = mean_of(dependent);
    double sxy = 0.0;
    for (std::size_t i = 0; i < t; ++i)
        sxy += (benchmark[i] - mean_x) * (dependent[i] - mean_y);

    AlphaRegressionResult r;
    r.observations = t;
    r.beta = sxy / sxx;
    r.alpha_daily = mean_y - r.beta * mean_x;
    r.alpha_annualized = kTradingDaysPerYear * r.alpha_daily;

    // HC1 sandwich: (X'X)^-1 X' diag(e^2) X (X'X)^-1 * T/(T-2)
    double ss_res = 0.0, ss_tot = 0.0;
    double s_e2 = 0.0, s_e2x = 0.0, s_e2xx = 0.0, sum_x = 0.0, sum_xx = 0.0;
    for (std::size_t i = 0; i < t; ++i) {
        const double e = dependent[i] - r.alpha_daily - r.beta * benchmark[i];
        const double e2 = e * e;
        ss_res += e2;
        ss_tot += (dependent[i] - mean_y) * (dependent[i] - mean_y);
        s_e2 += e2;
        s_e2x += e2 * benchmark[i];
        s_e2xx += e2 * benchmark[i] * benchmark[i];
        sum_x += benchmark[i];
        sum_xx += benchmark[i] * benchmark[i];
    }
    r.r_squared = ss_tot == 0.0 ? 1.0 : 1.0 - ss_res / ss_tot;

    const double det = static_cast<double>(t) * sum_xx - sum_x * sum_x;
    // (X'X)^-1 = [sum_xx, -sum_x; -sum_x, t] / det  for X = [1, x]
    const double inv00 = sum_xx / det, inv01 = -sum_x / det, inv11 = static_cast<double>(t) / det;
    // middle = X' diag(e2) X = [s_e2, s_e2x; s_e2x, s_e2xx]
    const double m00 = s_e2, m01 = s_e2x, m11 = s_e2xx;
    const double hc1 = static_cast<double>(t) / static_cast<double>(t - 2);
    const double var_alpha =
        hc1 * (inv00 * (m00 * inv00 + m01 * inv01) + inv01 * (m01 * inv00 + m11 * inv01));
    const double var_beta =
        hc1 * (inv01 * (m00 * inv01 + m01 * inv11) + inv11 * (m01 * inv01 + m11 * inv11));
    r.alpha_se = std::sqrt(std::max(0.0, var_alpha));
    r.beta_se = std::sqrt(std::max(0.0, var_beta));
    r.alpha_t = r.alpha_se > 0.0 ? r.alpha_daily / r.alpha_se : 0.0;
    r.beta_t = r.beta_se > 0.0 ? r.beta / r.beta_se : 0.0;
    return r;
}

// ---------------------------------------------------------------------------
// Label clustering
// ---------------------------------------------------------------------------

namespace {

std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace

std::vector<double> label_embedding(const std::string& label, std::size_t dim) {
    std::vector<double> v(dim, 0.0);
    std::string token;
    auto flush = [&]() {
        if (token.empty()) return;
        const std::uint64_t h = fnv1a64(token);
        const std::size_t idx = h % dim;
        const double sign = (h >> 63) ? -1.0 : 1.0;
        v[idx] += sign;
        token.clear();
    };
    for (char c : label) {
        if (c == ' ' || c == '\t' || c == ',' || c == ':' || c == ';') flush();
        else token += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    flush();
    double norm = 0.0;
    for (double x : v) norm += x * x;
    if (norm > 0.0) {
        norm = std::sqrt(norm);
        for (double& x : v) x /= norm;
    }
    return v;
}

Matrix embed_labels(const std::vector<std::string>& labels, std::size_t dim) {
    Matrix out(labels.size(), dim);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const std::vector<double> v = label_embedding(labels[i], dim);
        std::copy(v.begin(), v.end(), out.data() + i * dim);
    }
    return out;
}

namespace {

double sq_dist(const double* a, const double* b, std::size_t d) {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        const double diff = a[i] - b[i];
        s += diff * diff;
    }
    return s;
}

KMeansResult kmeans_once(const Matrix& points, std::size_t k, RngStream rng,
                         std::size_t max_iterations) {
    const std::size_t n = points.rows(), d = points.cols();
    KMeansResult result;
    result.centroids = Matrix(k, d);

    // k-means++ seeding
    std::vector<std::size_t> chosen;
    chosen.push_back(rng.next_below(n));
    std::vector<double> best_dist(n, 1e300);
    while (chosen.size() < k) {
        const double* last =
            points.data() + chosen.back() * d;
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            best_dist[i] = std::min(best_dist[i], sq_dist(points.data() + i * d, last, d));
            total += best_dist[i];
        }
        if (total <= 0.0) {
            chosen.push_back(rng.next_below(n));  // duplicate points
            continue;
        }
        const double u = rng.uniform01() * total;
        double acc = 0.0;
        std::size_t pick = n - 1;
        for (std::size_t i = 0; i < n; ++i) {
            acc += best_dist[i];
            if (u < acc) {
                pick = i;
                break;
            }
        }
        chosen.push_back(pick);
    }
    for (std::size_t c = 0; c < k; ++c)
        std::copy(points.data() + chosen[c] * d, points.data() + (chosen[c] + 1) * d,
                  result.centroids.data() + c * d);

    result.assignment.assign(n, 0);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t iter = 0; iter < max_iterations; ++iter) {
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            double best_d = 1e300;
            for (std::size_t c = 0; c < k; ++c) {
                const double dist =
                    sq_dist(points.data() + i * d, result.centroids.data() + c * d, d);
                if (dist < best_d) {
                    best_d = dist;
                    best = c;
                }
            }
            if (result.assignment[i] != best) {
                result.assignment[i] = best;
                changed = true;
            }
        }
        if (!changed && iter > 0) break;

        Matrix sums(k, d);
        counts.assign(k, 0);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t c = result.assignment[i];
            counts[c] += 1;
            for (std::size_t j = 0; j < d; ++j)
                sums.at(c, j) += points.at(i, j);
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] == 0) {
                result.degenerate = true;  // keep the previous centroid
                continue;
            }
            for (std::size_t j = 0; j < d; ++j)
                result.centroids.at(c, j) = sums.at(c, j) / static_cast<double>(counts[c]);
        }
    }

    result.inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        result.inertia += sq_dist(points.data() + i * d,
                                  result.centroids.data() + result.assignment[i] * d, d);
    return result;
}

}  // namespace

KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed,
                    std::size_t restarts, std::size_t max_iterations) {
    if (k < 1 || k > points.rows())
        throw std::invalid_argument("k must be between 1 and the number of points");
    const RngStream base = RngStream(seed).split("kmeans");
    KMeansResult best;
    bool have = false;
    for (std::size_t r = 0; r < restarts; ++r) {
        KMeansResult candidate = kmeans_once(points, k, base.split(r), max_iterations);
        if (!have || candidate.inertia < best.inertia) {
            best = std::move(candidate);
            have = true;
        }
    }
    return best;
}

double mean_silhouette(const Matrix& points, const std::vector<std::size_t>& assignment,
                       std::size_t k) {
    const std::size_t n = points.rows(), d = points.cols();
    if (assignment.size() != n) throw std::invalid_argument("assignment size mismatch");
    if (k < 2) throw std::invalid_argument("silhouette needs at least two clusters");

    std::vector<std::size_t> counts(k, 0);
    for (std::size_t c : assignment) counts[c] += 1;

    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> mean_dist(k, 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            mean_dist[assignment[j]] +=
                std::sqrt(sq_dist(points.data() + i * d, points.data() + j * d, d));
        }
        const std::size_t own = assignment[i];
        double a = 0.0;
        if (counts[own] > 1) a = mean_dist[own] / static_cast<double>(counts[own] - 1);
        double b = 1e300;
        for (std::size_t c = 0; c < k; ++c) {
            if (c == own || counts[c] == 0) continue;
            b = std::min(b, mean_dist[c] / static_cast<double>(counts[c]));
        }
        if (counts[own] <= 1 || b == 1e300) continue;  // singleton convention: s = 0
        total += (b - a) / std::max(a, b);
    }
    return total / static_cast<double>(n);
}

ClusterAssignment cluster_labels(const Matrix& embeddings, std::size_t k_min,
                                 std::size_t k_max, std::uint64_t seed) {
    const std::size_t n = embeddings.rows();
    if (k_min < 2 || k_max < k_min)
        throw std::invalid_argument("cluster range must satisfy 2 <= k_min <= k_max");
    if (n < k_max + 1)
        throw std::invalid_argument("need at least k_max + 1 labels to cluster");

    bool all_identical = true;
    for (std::size_t i = 1; i < n && all_identical; ++i)
        for (std::size_t j = 0; j < embeddings.cols(); ++j)
            if (embeddings.at(i, j) != embeddings.at(0, j)) {
                all_identical = false;
                break;
            }
    if (all_identical)
        throw std::invalid_argument("all label embeddings identical: silhouette undefined");

    ClusterAssignment best;
    double best_sil = -2.0;
    for (std::size_t k = k_min; k <= k_max; ++k) {
        const KMeansResult km = kmeans(embeddings, k, seed + k);
        const double sil = mean_silhouette(embeddings, km.assignment, k);
        if (sil > best_sil) {
            best_sil = sil;
            best.cluster_of = km.assignment;
            best.centroids = km.centroids;
            best.chosen_k = k;
            best.silhouette = sil;
            best.degenerate_warning = km.degenerate;
        }
    }
    return best;
}

std::map<std::size_t, std::string> load_merge_map(const std::filesystem::path& path) {
    const auto j = nlohmann::json::parse(io::read_file(path));
    if (!j.is_object()) throw std::runtime_error("merge map must be a JSON object");
    std::map<std::size_t, std::string> out;
    for (const auto& [key, value] : j.items())
        out[std::stoull(key)] = value.get<std::string>();
    return out;
}

void apply_merge_map(ClusterAssignment& assignment,
                     const std::map<std::size_t, std::string>& merge_map) {
    std::set<std::size_t> raw_ids(assignment.cluster_of.begin(),
                                  assignment.cluster_of.end());
    for (std::size_t id : raw_ids) {
        if (!merge_map.count(id))
            throw std::invalid_argument("merge map misses raw cluster " +
                                        std::to_string(id));
    }
    for (const auto& [id, name] : merge_map) {
        if (id >= assignment.chosen_k)
            throw std::invalid_argument("merge map names unknown raw cluster " +
                                        std::to_string(id));
        if (name.empty()) throw std::invalid_argument("empty group name in merge map");
    }
    assignment.group_of.resize(assignment.cluster_of.size());
    for (std::size_t i = 0; i < assignment.cluster_of.size(); ++i)
        assignment.group_of[i] = merge_map.at(assignment.cluster_of[i]);
}

// ---------------------------------------------------------------------------
// Leave-one-group-out attribution
// ---------------------------------------------------------------------------

void pair_by_day(const std::vector<double>& returns_a,
                 const std::vector<std::uint32_t>& days_a,
                 const std::vector<double>& returns_b,
                 const std::vector<std::uint32_t>& days_b,
                 std::vector<double>& paired_a, std::vector<double>& paired_b) {
    if (returns_a.size() != days_a.size() || returns_b.size() != days_b.size())
        throw std::invalid_argument("returns and day stamps must align");
    std::map<std::uint32_t, double> index;
    for (std::size_t i = 0; i < days_b.size(); ++i) index[days_b[i]] = returns_b[i];
    paired_a.clear();
    paired_b.clear();
    for (std::size_t i = 0; i < days_a.size(); ++i) {
        const auto it = index.find(days_a[i]);
        if (it == index.end()) continue;
        paired_a.push_back(returns_a[i]);
        paired_b.push_back(it->second);
    }
}

ShapleyTable shapley_sharpe_table(const PipelineRunner& runner,
                                  const std::map<std::string, std::vector<std::size_t>>& groups,
                                  const std::vector<std::size_t>& all_features) {
    ShapleyTable table;
    const PipelineOutcome full = runner(all_features);
    const SharpeReport full_sharpe = annualized_sharpe(full.returns);
    if (!full_sharpe.annualized)
        throw std::runtime_error("full-model returns have zero variance");
    table.full_sharpe = *full_sharpe.annualized;
    table.full_average_daily_accuracy = full.average_daily_accuracy;
    table.full_total_accuracy = full.total_accuracy;

    std::vector<std::pair<std::string, std::vector<std::size_t>>> ordered(groups.begin(),
                                                                          groups.end());
    table.rows.resize(ordered.size());
    parallel_for(ordered.size(), [&](std::size_t gi) {
        const auto& [name, members] = ordered[gi];
        ShapleyRow row;
        row.group = name;
        row.n_features = members.size();
        if (members.empty()) {
            row.empty_group = true;
            table.rows[gi] = std::move(row);
            return;
        }

        std::vector<std::size_t> without;
        for (std::size_t f : all_features)
            if (std::find(members.begin(), members.end(), f) == members.end())
                without.push_back(f);

        const PipelineOutcome only = runner(members);
        const PipelineOutcome rest = runner(without);
        row.average_daily_accuracy = only.average_daily_accuracy;
        row.total_accuracy = only.total_accuracy;

        const SharpeReport only_sharpe = annualized_sharpe(only.returns);
        if (only_sharpe.annualized) row.individual_sharpe = *only_sharpe.annualized;
        const SharpeReport rest_sharpe = annualized_sharpe(rest.returns);
        if (rest_sharpe.annualized) {
            row.shapley_sharpe = table.full_sharpe - *rest_sharpe.annualized;
            std::vector<double> paired_rest, paired_full;
            if (rest.days.empty() && rest.returns.size() == full.returns.size()) {
                paired_rest = rest.returns;  // index pairing when no day stamps
                paired_full = full.returns;
            } else if (!rest.days.empty() && !full.days.empty()) {
                pair_by_day(rest.returns, rest.days, full.returns, full.days,
                            paired_rest, paired_full);
            }
            if (paired_rest.size() >= 30 && paired_rest != paired_full) {
                try {
                    const JkMemmelResult test = jk_memmel_test(paired_rest, paired_full,
                                                               Alternative::TwoSided);
                    row.significance = significance_stars(test.p_value);
                } catch (const std::invalid_argument&) {
                    // zero-variance pairing: leave the stars blank
                }
            }
        }
        table.rows[gi] = std::move(row);
    });

    std::sort(table.rows.begin(), table.rows.end(), [](const ShapleyRow& a,
                                                       const ShapleyRow& b) {
        const double va = a.shapley_sharpe.value_or(-1e300);
        const double vb = b.shapley_sharpe.value_or(-1e300);
        if (va != vb) return va > vb;
        return a.group < b.group;
    });
    return table;
}

void write_shapley_csv(const ShapleyTable& table, const std::filesystem::path& path) {
    io::CsvWriter w({"group", "shapley_sharpe", "individual_sharpe", "accuracy",
                     "n_features", "significance"});
    w.add_row({"ALL", "", io::CsvWriter::format_number(table.full_sharpe),
               io::CsvWriter::format_number(table.full_average_daily_accuracy),
               "", ""});
    for (const auto& row : table.rows) {
        w.add_row({row.group,
                   row.shapley_sharpe ? io::CsvWriter::format_number(*row.shapley_sharpe)
                                      : "missing",
                   row.individual_sharpe
                       ? io::CsvWriter::format_number(*row.individual_sharpe)
                       : "missing",
                   io::CsvWriter::format_number(row.average_daily_accuracy),
                   io::CsvWriter::format_int(static_cast<long long>(row.n_features)),
                   row.significance});
    }
    w.write(path);
}

// ---------------------------------------------------------------------------
// Rank statistics
// ---------------------------------------------------------------------------

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t q = i; q <= j; ++q) ranks[order[q]] = avg;
        i = j + 1;
    }
    return ranks;
}

// Regularized incomplete beta via Lentz's continued fraction.
double incomplete_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_beta = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                           a * std::log(x) + b * std::log(1.0 - x);
    const bool swap = x >= (a + 1.0) / (a + b + 2.0);
    if (swap) return 1.0 - incomplete_beta(b, a, 1.0 - x);

    const double tiny = 1e-30;
    double c = 1.0, d = 1.0 - (a + b) * x / (a + 1.0);
    if (std::abs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= 300; ++m) {
        const double m2 = 2.0 * m;
        double num = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        d = 1.0 + num * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + num / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        h *= d * c;
        num = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
        d = 1.0 + num * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + num / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double delta = d * c;
        h *= delta;
        if (std::abs(delta - 1.0) < 1e-14) break;
    }
    return std::exp(ln_beta) * h / a;
}

}  // namespace

double student_t_cdf(double t, double dof) {
    if (dof <= 0.0) throw std::invalid_argument("degrees of freedom must be positive");
    const double x = dof / (dof + t * t);
    const double tail = 0.5 * incomplete_beta(0.5 * dof, 0.5, x);
    return t >= 0.0 ? 1.0 - tail : tail;
}

double spearman_rho(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2)
        throw std::invalid_argument("spearman needs two aligned series");
    const std::vector<double> rx = average_ranks(x);
    const std::vector<double> ry = average_ranks(y);
    const double mx = mean_of(rx), my = mean_of(ry);
    double cov = 0.0, vx = 0.0, vy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        cov += (rx[i] - mx) * (ry[i] - my);
        vx += (rx[i] - mx) * (rx[i] - mx);
        vy += (ry[i] - my) * (ry[i] - my);
    }
    if (vx == 0.0 || vy == 0.0) return 0.0;
    return cov / std::sqrt(vx * vy);
}

double spearman_p_value(double rho, std::size_t n) {
    if (n < 3) return 1.0;
    if (std::abs(rho) >= 1.0) return 0.0;
    const double dof = static_cast<double>(n - 2);
    const double t = rho * std::sqrt(dof / (1.0 - rho * rho));
    return 2.0 * (1.0 - student_t_cdf(std::abs(t), dof));
}

}  // namespace saefin::stats
