#include "featselect.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "io_util.hpp"
#include "parallel.hpp"

namespace saefin::featselect {

using num::Matrix;

std::vector<double> embed_news(const lm::TinyLm& model, const sae::Sae& sae,
                               const datasim::Vocabulary& vocab,
                               const datasim::NewsItem& item, lm::TapPoint tap,
                               Pooling pooling) {
    if (item.tokens.empty()) throw std::invalid_argument("news item has no tokens");
    const lm::TokenSeq prompt = datasim::make_classification_prompt(vocab, item);
    const lm::ForwardTrace trace = lm::forward(model, prompt);
    const Matrix& stream = trace.residuals.at(tap.layer);

    const std::size_t k = sae.config.latent_dim;
    std::vector<double> pooled(k, 0.0);
    std::vector<double> x(sae.config.input_dim);
    // positions 1..len cover the news tokens (0 is the start token, the query
    // slot comes after them)
    const std::size_t n_news = item.tokens.size();
    for (std::size_t p = 1; p <= n_news; ++p) {
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = stream.at(p, i);
        const sae::SparseCode z = sae::encode(sae, x);
        for (std::size_t j = 0; j < k; ++j) {
            if (pooling == Pooling::Mean) pooled[j] += z[j];
            else pooled[j] = std::max(pooled[j], z[j]);
        }
    }
    if (pooling == Pooling::Mean) {
        for (double& v : pooled) v /= static_cast<double>(n_news);
    }
    return pooled;
}

num::Matrix embed_all_news(const lm::TinyLm& model, const sae::Sae& sae,
                           const datasim::World& world, lm::TapPoint tap,
                           Pooling pooling) {
    Matrix out(world.news.size(), sae.config.latent_dim);
    parallel_for(world.news.size(), [&](std::size_t i) {
        const std::vector<double> v =
            embed_news(model, sae, world.vocab, world.news[i], tap, pooling);
        std::copy(v.begin(), v.end(), out.data() + i * out.cols());
    });
    return out;
}

// ---------------------------------------------------------------------------
// Logistic regression
// ---------------------------------------------------------------------------

namespace {

double sigmoid(double t) {
    if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
    const double e = std::exp(t);
    return e / (1.0 + e);
}

double logistic_ce(const Matrix& x, const std::vector<int>& y,
                   const std::vector<double>& w, double b) {
    const std::size_t n = x.rows(), d = x.cols();
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double t = b;
        const double* row = x.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) t += row[j] * w[j];
        const double p = sigmoid(t);
        loss -= y[i] == 1 ? std::log(std::max(p, 1e-300))
                          : std::log(std::max(1.0 - p, 1e-300));
    }
    return loss / static_cast<double>(n);
}

}  // namespace

LogisticModel fit_logistic(const Matrix& x, const std::vector<int>& y,
                           const LogisticOptions& options) {
    const std::size_t n = x.rows(), d = x.cols();
    if (n == 0 || y.size() != n)
        throw std::invalid_argument("logistic fit needs one label per row");
    for (int v : y) {
        if (v != 0 && v != 1)
            throw std::invalid_argument("labels must be 0 or 1");
    }

    Matrix params(1, d + 1);  // weights then intercept
    num::AdamState state = num::AdamState::for_param(params);
    Matrix grad(1, d + 1);

    LogisticModel best;
    double best_val = 1e300;
    std::size_t checks_without_improvement = 0;
    const bool early_stop = options.validation_x != nullptr;

    LogisticModel model;
    model.weights.assign(d, 0.0);
    const double inv_n = 1.0 / static_cast<double>(n);
    std::vector<double> residual(n);

    std::size_t iter = 0;
    for (; iter < options.max_iterations; ++iter) {
        for (std::size_t j = 0; j <= d; ++j) grad[j] = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double t = params[d];
            const double* row = x.data() + i * d;
            for (std::size_t j = 0; j < d; ++j) t += row[j] * params[j];
            residual[i] = sigmoid(t) - static_cast<double>(y[i]);
        }
        for (std::size_t i = 0; i < n; ++i) {
            const double* row = x.data() + i * d;
            const double r = residual[i] * inv_n;
            for (std::size_t j = 0; j < d; ++j) grad[j] += r * row[j];
            grad[d] += r;
        }
        for (std::size_t j = 0; j < d; ++j) grad[j] += 2.0 * options.ridge * params[j];

        double gnorm = 0.0;
        for (std::size_t j = 0; j <= d; ++j) gnorm += grad[j] * grad[j];
        gnorm = std::sqrt(gnorm);
        if (gnorm < options.gradient_tolerance) {
            model.converged = true;
            break;
        }
        num::adam_step(params, grad, state, options.learning_rate);

        if (early_stop && (iter + 1) % options.check_every == 0) {
            std::vector<double> w(params.data(), params.data() + d);
            const double val = logistic_ce(*options.validation_x, *options.validation_y,
                                           w, params[d]);
            if (val < best_val) {
                best_val = val;
                best.weights = w;
                best.intercept = params[d];
                checks_without_improvement = 0;
            } else if (++checks_without_improvement >= options.patience) {
                break;
            }
        }
    }
    model.iterations = iter;
    if (early_stop && !best.weights.empty()) {
        model.weights = best.weights;
        model.intercept = best.intercept;
    } else {
        model.weights.assign(params.data(), params.data() + d);
        model.intercept = params[d];
    }
    return model;
}

double predict_probability(const LogisticModel& model, const double* x, std::size_t n) {
    if (n != model.weights.size())
        throw std::invalid_argument("feature width does not match the model");
    double t = model.intercept;
    for (std::size_t j = 0; j < n; ++j) t += x[j] * model.weights[j];
    return sigmoid(t);
}

// ---------------------------------------------------------------------------
// Ranking
// ---------------------------------------------------------------------------

FeatureRanking rank_features(const Matrix& embeddings, const std::vector<int>& labels,
                             std::size_t num_pcs, const std::string& window_id) {
    const std::size_t n = embeddings.rows(), k = embeddings.cols();
    if (labels.size() != n)
        throw std::invalid_argument("one label per embedding row required");
    if (n <= num_pcs)
        throw std::invalid_argument("need more rows than principal components");

    FeatureRanking ranking;
    ranking.window_id = window_id;
    ranking.means.assign(k, 0.0);
    ranking.stds.assign(k, 0.0);
    ranking.kept.assign(k, false);
    ranking.importance.assign(k, 0.0);

    for (std::size_t j = 0; j < k; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += embeddings.at(i, j);
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = embeddings.at(i, j) - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        ranking.means[j] = mean;
        ranking.stds[j] = std::sqrt(var);
        ranking.kept[j] = ranking.stds[j] > 1e-12;
    }

    std::vector<std::size_t> live;
    for (std::size_t j = 0; j < k; ++j)
        if (ranking.kept[j]) live.push_back(j);

    if (!live.empty()) {
        Matrix standardized(n, live.size());
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t c = 0; c < live.size(); ++c) {
                const std::size_t j = live[c];
                standardized.at(i, c) =
                    (embeddings.at(i, j) - ranking.means[j]) / ranking.stds[j];
            }
        }
        const std::size_t p = std::min(num_pcs, std::min(n - 1, live.size()));
        const num::PcaResult pca = num::pca(standardized, p);
        const LogisticModel model = fit_logistic(pca.scores, labels);
        ranking.converged = model.converged;
        // back-project: w = V beta, importance = |w|
        for (std::size_t c = 0; c < live.size(); ++c) {
            double w = 0.0;
            for (std::size_t q = 0; q < p; ++q)
                w += pca.components.at(c, q) * model.weights[q];
            ranking.importance[live[c]] = std::abs(w);
        }
    }

    ranking.order.resize(k);
    for (std::size_t j = 0; j < k; ++j) ranking.order[j] = j;
    std::sort(ranking.order.begin(), ranking.order.end(),
              [&](std::size_t a, std::size_t b) {
                  if (ranking.importance[a] != ranking.importance[b])
                      return ranking.importance[a] > ranking.importance[b];
                  return a < b;
              });
    return ranking;
}

ReducedEmbedding select_top_k(const FeatureRanking& ranking, std::size_t k) {
    if (k < 1) throw std::invalid_argument("k must be >= 1");
    ReducedEmbedding out;
    if (k > ranking.order.size()) {
        out.clamped = true;
        k = ranking.order.size();
    }
    out.feature_ids.assign(ranking.order.begin(), ranking.order.begin() + k);
    return out;
}

void write_ranking_csv(const FeatureRanking& ranking, const std::filesystem::path& path) {
    io::CsvWriter w({"feature_id", "importance", "rank"});
    for (std::size_t r = 0; r < ranking.order.size(); ++r) {
        const std::size_t j = ranking.order[r];
        w.add_row({io::CsvWriter::format_int(static_cast<long long>(j)),
                   io::CsvWriter::format_number(ranking.importance[j]),
                   io::CsvWriter::format_int(static_cast<long long>(r + 1))});
    }
    w.write(path);
}

}  // namespace saefin::featselect
