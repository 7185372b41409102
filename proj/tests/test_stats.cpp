#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "io_util.hpp"
#include "stats.hpp"

using namespace saefin;
using namespace saefin::stats;

TEST_CASE("sharpe: zero variance is missing, known moments converge, scale-free") {
    CHECK_FALSE(annualized_sharpe(std::vector<double>(50, 0.0)).annualized.has_value());
    CHECK_THROWS_AS(annualized_sharpe({0.1}), std::invalid_argument);

    num::RngStream rng(5);
    std::vector<double> rets(100000);
    for (auto& r : rets) r = rng.normal(0.001, 0.01);
    const SharpeReport rep = annualized_sharpe(rets);
    REQUIRE(rep.annualized.has_value());
    const double expect = std::sqrt(252.0) * 0.1;
    CHECK(std::abs(*rep.annualized - expect) / expect < 0.03);

    std::vector<double> doubled(rets);
    for (auto& r : doubled) r *= 2.0;
    CHECK(*annualized_sharpe(doubled).annualized ==
          doctest::Approx(*rep.annualized).epsilon(1e-12));
}

TEST_CASE("jk-memmel: identical series give z = 0 and two-sided p = 1") {
    num::RngStream rng(6);
    std::vector<double> a(100);
    for (auto& v : a) v = rng.normal(0.0005, 0.01);
    const JkMemmelResult r = jk_memmel_test(a, a);
    CHECK(r.z == 0.0);
    CHECK(r.p_value == 1.0);
    CHECK(r.correlation == doctest::Approx(1.0));
}

TEST_CASE("jk-memmel: swapping the series negates z exactly") {
    num::RngStream rng(7);
    std::vector<double> a(200), b(200);
    for (std::size_t i = 0; i < 200; ++i) {
        a[i] = rng.normal(0.001, 0.01);
        b[i] = rng.normal(0.0005, 0.012);
    }
    const JkMemmelResult ab = jk_memmel_test(a, b);
    const JkMemmelResult ba = jk_memmel_test(b, a);
    CHECK(ab.z == -ba.z);
    CHECK(ab.sharpe_diff == -ba.sharpe_diff);
    // one-sided alternatives are complementary
    const double p_less = jk_memmel_test(a, b, Alternative::Less).p_value;
    const double p_greater = jk_memmel_test(a, b, Alternative::Greater).p_value;
    CHECK(p_less + p_greater == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("jk-memmel rejects malformed input and flags small samples") {
    std::vector<double> a(40, 0.0), b(41, 0.0);
    CHECK_THROWS_AS(jk_memmel_test(a, b), std::invalid_argument);
    num::RngStream rng(8);
    std::vector<double> c(20), d(20);
    for (std::size_t i = 0; i < 20; ++i) {
        c[i] = rng.normal();
        d[i] = rng.normal();
    }
    CHECK(jk_memmel_test(c, d).low_sample);
    CHECK_THROWS_AS(jk_memmel_test(std::vector<double>(40, 1.0), c),
                    std::invalid_argument);
}

TEST_CASE("jk-memmel null calibration: rejection rate near the nominal size") {
    // Monte-Carlo oracle: two independent streams with identical true Sharpe.
    num::RngStream rng(9);
    const int trials = 10000;
    const std::size_t t = 500;
    int rejections = 0;
    std::vector<double> a(t), b(t);
    for (int trial = 0; trial < trials; ++trial) {
        for (std::size_t i = 0; i < t; ++i) {
            a[i] = rng.normal(0.0005, 0.01);
            b[i] = rng.normal(0.0005, 0.01);
        }
        if (jk_memmel_test(a, b).p_value < 0.05) ++rejections;
    }
    const double rate = double(rejections) / double(trials);
    CHECK(rate >= 0.04);
    CHECK(rate <= 0.06);
}

TEST_CASE("alpha regression identities") {
    num::RngStream rng(10);
    std::vector<double> x(120);
    for (auto& v : x) v = rng.normal(0.0, 0.01);

    const AlphaRegressionResult same = alpha_regression(x, x);
    CHECK(std::abs(same.alpha_daily) < 1e-10);
    CHECK(std::abs(same.beta - 1.0) < 1e-10);
    CHECK(same.r_squared == doctest::Approx(1.0).epsilon(1e-12));

    std::vector<double> scaled(x);
    for (auto& v : scaled) v *= 2.0;
    const AlphaRegressionResult twice = alpha_regression(scaled, x);
    CHECK(std::abs(twice.alpha_daily) < 1e-10);
    CHECK(std::abs(twice.beta - 2.0) < 1e-10);

    std::vector<double> shifted(x);
    for (auto& v : shifted) v += 0.0007;
    const AlphaRegressionResult offset = alpha_regression(shifted, x);
    CHECK(offset.alpha_daily == doctest::Approx(0.0007).epsilon(1e-9));
    CHECK(offset.alpha_annualized == doctest::Approx(252.0 * 0.0007).epsilon(1e-9));

    CHECK_THROWS_AS(alpha_regression(x, std::vector<double>(120, 0.5)),
                    std::invalid_argument);
}

TEST_CASE("three separated blobs are recovered at the right K") {
    num::RngStream rng(11);
    const std::size_t per = 30;
    num::Matrix points(3 * per, 2);
    const double centers[3][2] = {{0.0, 0.0}, {10.0, 0.0}, {0.0, 10.0}};
    std::vector<std::size_t> truth(3 * per);
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < per; ++i) {
            const std::size_t row = c * per + i;
            points.at(row, 0) = centers[c][0] + 0.5 * rng.normal();
            points.at(row, 1) = centers[c][1] + 0.5 * rng.normal();
            truth[row] = c;
        }
    }
    const ClusterAssignment got = cluster_labels(points, 2, 6, 21);
    CHECK(got.chosen_k == 3);
    CHECK(got.silhouette > 0.6);

    // assignment matches the blobs up to relabeling
    std::map<std::size_t, std::set<std::size_t>> truth_to_raw;
    for (std::size_t i = 0; i < truth.size(); ++i)
        truth_to_raw[truth[i]].insert(got.cluster_of[i]);
    std::set<std::size_t> used;
    for (const auto& [t, raws] : truth_to_raw) {
        CHECK(raws.size() == 1);
        CHECK(used.insert(*raws.begin()).second);
    }
}

TEST_CASE("identical points are rejected; doubling is assignment-invariant") {
    num::Matrix same(10, 2, std::vector<double>(20, 3.0));
    CHECK_THROWS_AS(cluster_labels(same, 2, 4, 5), std::invalid_argument);

    num::RngStream rng(12);
    num::Matrix pts(40, 3);
    for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = rng.normal();
    const ClusterAssignment a = cluster_labels(pts, 2, 5, 33);
    num::Matrix doubled = pts;
    for (std::size_t i = 0; i < doubled.size(); ++i) doubled[i] *= 2.0;
    const ClusterAssignment b = cluster_labels(doubled, 2, 5, 33);
    CHECK(a.chosen_k == b.chosen_k);
    CHECK(a.cluster_of == b.cluster_of);
}

TEST_CASE("merge map: identity, coverage failures, paper-shaped 25 to 17") {
    ClusterAssignment assignment;
    assignment.chosen_k = 3;
    assignment.cluster_of = {0, 1, 2, 1, 0};

    std::map<std::size_t, std::string> identity{{0, "g0"}, {1, "g1"}, {2, "g2"}};
    apply_merge_map(assignment, identity);
    CHECK(assignment.group_of ==
          std::vector<std::string>{"g0", "g1", "g2", "g1", "g0"});

    std::map<std::size_t, std::string> missing{{0, "g0"}, {1, "g1"}};
    CHECK_THROWS_AS(apply_merge_map(assignment, missing), std::invalid_argument);
    std::map<std::size_t, std::string> extra{
        {0, "g0"}, {1, "g1"}, {2, "g2"}, {9, "bad"}};
    CHECK_THROWS_AS(apply_merge_map(assignment, extra), std::invalid_argument);

    std::map<std::size_t, std::string> all_one{{0, "g"}, {1, "g"}, {2, "g"}};
    apply_merge_map(assignment, all_one);
    for (const auto& g : assignment.group_of) CHECK(g == "g");

    // 25 raw clusters merged into 17 named groups
    ClusterAssignment big;
    big.chosen_k = 25;
    for (std::size_t i = 0; i < 25; ++i) big.cluster_of.push_back(i);
    std::map<std::size_t, std::string> paper_shape;
    for (std::size_t i = 0; i < 25; ++i) {
        const std::size_t group = i < 17 ? i : (i - 17);  // fold the last 8 back
        paper_shape[i] = "group-" + std::to_string(group);
    }
    apply_merge_map(big, paper_shape);
    std::set<std::string> distinct(big.group_of.begin(), big.group_of.end());
    CHECK(distinct.size() == 17);
}

TEST_CASE("label embeddings are deterministic unit vectors") {
    const auto a = label_embedding("tokens of class positive-sentiment");
    const auto b = label_embedding("tokens of class positive-sentiment");
    const auto c = label_embedding("tokens of class temporal");
    CHECK(a == b);
    CHECK(a != c);
    double norm = 0.0;
    for (double v : a) norm += v * v;
    CHECK(norm == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("attribution table: signal group first, inert group exactly zero") {
    // synthetic runner: returns carry signal only when a "signal" feature
    // (0..4) is included; feature 9 never fires anywhere.
    num::RngStream rng(13);
    const std::size_t days = 250;
    std::vector<double> noise(days), signal(days);
    for (std::size_t i = 0; i < days; ++i) {
        noise[i] = 0.01 * rng.normal();
        signal[i] = 0.004 + 0.01 * rng.normal();
    }
    const PipelineRunner runner = [&](const std::vector<std::size_t>& features) {
        bool has_signal = false;
        for (std::size_t f : features)
            if (f < 5) has_signal = true;
        PipelineOutcome out;
        out.returns.resize(days);
        for (std::size_t i = 0; i < days; ++i)
            out.returns[i] = noise[i] + (has_signal ? signal[i] : 0.0);
        out.average_daily_accuracy = has_signal ? 0.54 : 0.5;
        out.total_accuracy = out.average_daily_accuracy;
        return out;
    };

    std::map<std::string, std::vector<std::size_t>> groups{
        {"signal", {0, 1, 2, 3, 4}},
        {"filler", {5, 6, 7, 8}},
        {"inert", {9}},
        {"empty", {}},
    };
    std::vector<std::size_t> all{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    const ShapleyTable table = shapley_sharpe_table(runner, groups, all);

    REQUIRE(table.rows.size() == 4);
    CHECK(table.rows.front().group == "signal");
    CHECK(*table.rows.front().shapley_sharpe > 0.0);

    for (const auto& row : table.rows) {
        if (row.group == "inert") {
            REQUIRE(row.shapley_sharpe.has_value());
            CHECK(*row.shapley_sharpe == 0.0);  // exact: identical return stream
            CHECK(row.significance.empty());
        }
        if (row.group == "filler") {
            REQUIRE(row.shapley_sharpe.has_value());
            CHECK(*row.shapley_sharpe == 0.0);
        }
        if (row.group == "empty") CHECK(row.empty_group);
    }

    const auto path = std::filesystem::temp_directory_path() / "saefin_shapley.csv";
    write_shapley_csv(table, path);
    const auto csv = io::read_csv(path);
    CHECK(csv.header == std::vector<std::string>{"group", "shapley_sharpe",
                                                 "individual_sharpe", "accuracy",
                                                 "n_features", "significance"});
    CHECK(csv.rows.size() == 5);  // ALL + 4 groups
    CHECK(csv.rows[0][0] == "ALL");
}

TEST_CASE("spearman rank correlation and p-values") {
    CHECK(spearman_rho({1, 2, 3, 4, 5}, {2, 4, 6, 8, 10}) == doctest::Approx(1.0));
    CHECK(spearman_rho({1, 2, 3, 4, 5}, {5, 4, 3, 2, 1}) == doctest::Approx(-1.0));
    // monotone despite nonlinearity
    CHECK(spearman_rho({1, 2, 3, 4, 5}, {1, 8, 27, 64, 125}) == doctest::Approx(1.0));
    // ties handled by average ranks
    const double rho = spearman_rho({1, 1, 2, 2}, {1, 2, 3, 4});
    CHECK(rho > 0.6);
    CHECK(rho < 1.0);

    CHECK(spearman_p_value(0.0, 20) == doctest::Approx(1.0));
    CHECK(spearman_p_value(0.999, 20) < 1e-6);
    // Student-t sanity: symmetric, median at zero
    CHECK(student_t_cdf(0.0, 5.0) == doctest::Approx(0.5));
    CHECK(student_t_cdf(2.0, 10.0) + student_t_cdf(-2.0, 10.0) ==
          doctest::Approx(1.0).epsilon(1e-12));
    // against a frozen reference value: P(T_10 <= 2.0) = 0.96331
    CHECK(student_t_cdf(2.0, 10.0) == doctest::Approx(0.96331).epsilon(1e-4));
}

TEST_CASE("significance stars follow the usual thresholds") {
    CHECK(significance_stars(0.005) == "***");
    CHECK(significance_stars(0.03) == "**");
    CHECK(significance_stars(0.07) == "*");
    CHECK(significance_stars(0.2) == "");
}
