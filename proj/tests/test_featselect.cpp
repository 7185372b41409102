#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "featselect.hpp"

using namespace saefin;
using namespace saefin::featselect;

namespace {

// embeddings with independent non-negative coordinates
num::Matrix random_embeddings(num::RngStream& rng, std::size_t n, std::size_t k) {
    num::Matrix m(n, k);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = std::max(0.0, rng.normal(0.5, 1.0));
    return m;
}

}  // namespace

TEST_CASE("logistic fit separates a separable toy set") {
    num::RngStream rng(3);
    const std::size_t n = 200;
    num::Matrix x(n, 2);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        x.at(i, 0) = rng.normal();
        x.at(i, 1) = rng.normal();
        y[i] = x.at(i, 0) + 0.5 * x.at(i, 1) > 0.0 ? 1 : 0;
    }
    const LogisticModel model = fit_logistic(x, y);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double p = predict_probability(model, x.data() + 2 * i, 2);
        if ((p >= 0.5) == (y[i] == 1)) ++correct;
    }
    CHECK(double(correct) / double(n) > 0.99);
}

TEST_CASE("logistic fit rejects bad labels and mismatched sizes") {
    num::Matrix x(3, 1, {1, 2, 3});
    CHECK_THROWS_AS(fit_logistic(x, {0, 1}), std::invalid_argument);
    CHECK_THROWS_AS(fit_logistic(x, {0, 1, 2}), std::invalid_argument);
}

TEST_CASE("planted predictive feature is ranked first") {
    num::RngStream rng(7);
    const std::size_t n = 400, k = 12;
    num::Matrix x = random_embeddings(rng, n, k);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i)
        y[i] = x.at(i, 7) + 0.2 * rng.normal() > 0.5 ? 1 : 0;
    const FeatureRanking ranking = rank_features(x, y, 8);
    CHECK(ranking.order.front() == 7);
    CHECK(ranking.importance[7] > 0.0);
}

TEST_CASE("labels independent of features give an unstable top feature") {
    num::RngStream rng(11);
    const std::size_t n = 60, k = 16;
    const num::Matrix x = random_embeddings(rng, n, k);
    std::vector<int> base_labels(n);
    for (auto& v : base_labels) v = rng.uniform01() < 0.5 ? 1 : 0;

    std::map<std::size_t, int> winner_counts;
    const int resamples = 16;
    for (int b = 0; b < resamples; ++b) {
        num::RngStream boot = rng.split(static_cast<std::uint64_t>(b));
        num::Matrix xb(n, k);
        std::vector<int> yb(n);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t src = boot.next_below(n);
            for (std::size_t j = 0; j < k; ++j) xb.at(i, j) = x.at(src, j);
            yb[i] = base_labels[src];
        }
        if (std::count(yb.begin(), yb.end(), 1) == 0 ||
            std::count(yb.begin(), yb.end(), 0) == 0)
            continue;
        winner_counts[rank_features(xb, yb, 8).order.front()] += 1;
    }
    int max_count = 0;
    for (const auto& [f, c] : winner_counts) max_count = std::max(max_count, c);
    CHECK(max_count <= resamples / 2);  // no fixed winner
}

TEST_CASE("full-rank ranking equals a direct logistic fit on standardized data") {
    num::RngStream rng(13);
    const std::size_t n = 300, k = 8;
    num::Matrix x = random_embeddings(rng, n, k);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i)
        y[i] = 0.8 * x.at(i, 2) - 0.5 * x.at(i, 5) + 0.3 * rng.normal() > 0.3 ? 1 : 0;

    const FeatureRanking ranking = rank_features(x, y, k);

    // oracle: the same fit without the PCA rotation
    num::Matrix standardized(n, k);
    for (std::size_t j = 0; j < k; ++j) {
        for (std::size_t i = 0; i < n; ++i)
            standardized.at(i, j) = (x.at(i, j) - ranking.means[j]) / ranking.stds[j];
    }
    const LogisticModel direct = fit_logistic(standardized, y);
    for (std::size_t j = 0; j < k; ++j)
        CHECK(ranking.importance[j] ==
              doctest::Approx(std::abs(direct.weights[j])).epsilon(5e-3));
}

TEST_CASE("back-projection reproduces the PC-space decision function") {
    num::RngStream rng(17);
    const std::size_t n = 120, k = 6, p = 4;
    num::Matrix x = random_embeddings(rng, n, k);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = x.at(i, 1) > 0.5 ? 1 : 0;

    const FeatureRanking ranking = rank_features(x, y, p);

    // recompute the pieces independently: scores * beta == standardized * (V beta)
    num::Matrix standardized(n, k);
    for (std::size_t j = 0; j < k; ++j)
        for (std::size_t i = 0; i < n; ++i)
            standardized.at(i, j) = (x.at(i, j) - ranking.means[j]) / ranking.stds[j];
    const num::PcaResult pca = num::pca(standardized, p);
    const LogisticModel pc_fit = fit_logistic(pca.scores, y);
    num::Matrix beta(p, 1);
    for (std::size_t q = 0; q < p; ++q) beta[q] = pc_fit.weights[q];
    const num::Matrix w = num::matmul(pca.components, beta);  // k x 1
    const num::Matrix lhs = num::matmul(pca.scores, beta);    // n x 1
    const num::Matrix rhs = num::matmul(standardized, w);
    CHECK(num::max_abs_diff(lhs, rhs) < 1e-8);

    // and the importance stored in the ranking is |V beta|
    for (std::size_t j = 0; j < k; ++j)
        CHECK(ranking.importance[j] == doctest::Approx(std::abs(w[j])).epsilon(1e-9));
}

TEST_CASE("constant features are dropped and ranked last with zero importance") {
    num::RngStream rng(19);
    num::Matrix x = random_embeddings(rng, 80, 5);
    for (std::size_t i = 0; i < 80; ++i) x.at(i, 3) = 2.5;  // constant column
    std::vector<int> y(80);
    for (std::size_t i = 0; i < 80; ++i) y[i] = x.at(i, 0) > 0.5 ? 1 : 0;
    const FeatureRanking ranking = rank_features(x, y, 4);
    CHECK_FALSE(ranking.kept[3]);
    CHECK(ranking.importance[3] == 0.0);
    CHECK(ranking.order.back() == 3);
}

TEST_CASE("select_top_k: identity, singleton, nesting, clamping") {
    num::RngStream rng(23);
    num::Matrix x = random_embeddings(rng, 100, 6);
    std::vector<int> y(100);
    for (std::size_t i = 0; i < 100; ++i) y[i] = x.at(i, 4) > 0.5 ? 1 : 0;
    const FeatureRanking ranking = rank_features(x, y, 5);

    const ReducedEmbedding all = select_top_k(ranking, 6);
    CHECK(all.feature_ids.size() == 6);
    CHECK_FALSE(all.clamped);

    const ReducedEmbedding one = select_top_k(ranking, 1);
    CHECK(one.feature_ids.size() == 1);
    CHECK(one.feature_ids[0] == ranking.order[0]);

    const ReducedEmbedding five = select_top_k(ranking, 5);
    const ReducedEmbedding three = select_top_k(ranking, 3);
    for (std::size_t i = 0; i < 3; ++i) CHECK(three.feature_ids[i] == five.feature_ids[i]);

    const ReducedEmbedding clamped = select_top_k(ranking, 99);
    CHECK(clamped.clamped);
    CHECK(clamped.feature_ids.size() == 6);
    CHECK_THROWS_AS(select_top_k(ranking, 0), std::invalid_argument);
}

TEST_CASE("embed_news: single-token news equals that position's code") {
    const datasim::Vocabulary vocab = datasim::Vocabulary::standard(64);
    lm::TinyLmConfig mc;
    mc.vocab_size = 64;
    mc.hidden_dim = 16;
    mc.num_layers = 2;
    mc.num_heads = 2;
    mc.seed = 31;
    const lm::TinyLm model = lm::init_lm(mc);
    sae::SaeConfig sc;
    sc.input_dim = 16;
    sc.latent_dim = 20;
    sc.seed = 32;
    const sae::Sae autoenc = sae::init_sae(sc);

    datasim::NewsItem item;
    item.tokens = {17};
    const lm::TapPoint tap{1};
    const std::vector<double> nu = embed_news(model, autoenc, vocab, item, tap);

    const auto trace = lm::forward(model, datasim::make_classification_prompt(vocab, item));
    std::vector<double> x(16);
    for (std::size_t i = 0; i < 16; ++i) x[i] = trace.residuals[1].at(1, i);
    const sae::SparseCode z = sae::encode(autoenc, x);
    REQUIRE(nu.size() == z.size());
    for (std::size_t j = 0; j < z.size(); ++j)
        CHECK(nu[j] == doctest::Approx(z[j]).epsilon(1e-12));

    // identical items embed identically; all entries non-negative
    datasim::NewsItem again = item;
    CHECK(embed_news(model, autoenc, vocab, again, tap) == nu);
    for (double v : nu) CHECK(v >= 0.0);
}
