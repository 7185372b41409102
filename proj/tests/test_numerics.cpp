#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "numerics.hpp"

using namespace saefin::num;

namespace {

Matrix random_matrix(RngStream& rng, std::size_t r, std::size_t c) {
    Matrix m(r, c);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.normal();
    return m;
}

}  // namespace

TEST_CASE("matmul identity leaves matrix unchanged") {
    RngStream rng(7);
    Matrix m = random_matrix(rng, 3, 5);
    Matrix out = matmul(Matrix::identity(3), m);
    CHECK(max_abs_diff(out, m) == 0.0);
}

TEST_CASE("matmul hand-computed 2x2 times column") {
    Matrix a(2, 2, {1, 2, 3, 4});
    Matrix b(2, 1, {1, 1});
    Matrix out = matmul(a, b);
    CHECK(out.at(0, 0) == 3.0);
    CHECK(out.at(1, 0) == 7.0);
}

TEST_CASE("matmul zeros annihilate") {
    RngStream rng(11);
    Matrix m = random_matrix(rng, 3, 2);
    Matrix out = matmul(Matrix(2, 3), m);
    CHECK(out.rows() == 2);
    CHECK(out.cols() == 2);
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == 0.0);
}

TEST_CASE("matmul rejects shape mismatch with diagnostic") {
    Matrix a(2, 3), b(2, 3);
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("2x3"), std::invalid_argument);
}

TEST_CASE("matmul associativity on random triples") {
    RngStream rng(42);
    for (int trial = 0; trial < 20; ++trial) {
        Matrix a = random_matrix(rng, 4, 6);
        Matrix b = random_matrix(rng, 6, 5);
        Matrix c = random_matrix(rng, 5, 3);
        Matrix left = matmul(matmul(a, b), c);
        Matrix right = matmul(a, matmul(b, c));
        const double scale = std::max(1.0, frobenius_norm(left));
        CHECK(max_abs_diff(left, right) / scale < 1e-9);
    }
}

// --------------------------------------------------------------------------
// RNG
// --------------------------------------------------------------------------

TEST_CASE("philox known-answer vector: zero key and counter") {
    // Reference output of Philox4x32-10 for ctr = {0,0,0,0}, key = {0,0}.
    RngStream rng(0, 0);
    CHECK(rng.next_u32() == 0x6627e8d5u);
    CHECK(rng.next_u32() == 0xe169c58du);
    CHECK(rng.next_u32() == 0xbc57ac4cu);
    CHECK(rng.next_u32() == 0x9b00dbd8u);
}

TEST_CASE("identical seed gives identical stream") {
    RngStream a(123), b(123);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("split streams are independent of parent draws") {
    RngStream a(9);
    RngStream b(9);
    (void)a.next_u64();  // consuming from the parent must not shift children
    RngStream child_a = a.split("worker");
    RngStream child_b = b.split("worker");
    for (int i = 0; i < 10; ++i) CHECK(child_a.next_u64() == child_b.next_u64());
    RngStream other = b.split("other");
    CHECK(other.next_u64() != child_b.next_u64());
}

TEST_CASE("uniform01 lies in [0,1) and has sane mean") {
    RngStream rng(5);
    double sum = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        double u = rng.uniform01();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        sum += u;
    }
    CHECK(std::abs(sum / n - 0.5) < 0.01);
}

TEST_CASE("normal has sane first two moments") {
    RngStream rng(6);
    double sum = 0.0, sumsq = 0.0;
    const int n = 50000;
    for (int i = 0; i < n; ++i) {
        double z = rng.normal();
        sum += z;
        sumsq += z * z;
    }
    CHECK(std::abs(sum / n) < 0.02);
    CHECK(std::abs(sumsq / n - 1.0) < 0.03);
}

TEST_CASE("next_below is within range and shuffle is deterministic") {
    RngStream rng(77);
    for (int i = 0; i < 1000; ++i) CHECK(rng.next_below(7) < 7);
    std::vector<int> v1{1, 2, 3, 4, 5, 6, 7, 8};
    std::vector<int> v2 = v1;
    RngStream s1(31), s2(31);
    s1.shuffle(v1);
    s2.shuffle(v2);
    CHECK(v1 == v2);
}

// --------------------------------------------------------------------------
// Adam
// --------------------------------------------------------------------------

TEST_CASE("adam zero gradient leaves params unchanged and bumps step") {
    Matrix p(2, 2, {1, 2, 3, 4});
    Matrix g(2, 2);
    AdamState st = AdamState::for_param(p);
    adam_step(p, g, st, 0.1);
    CHECK(st.step == 1);
    CHECK(p.at(0, 0) == 1.0);
    CHECK(p.at(1, 1) == 4.0);
}

TEST_CASE("adam monotone descent under constant positive gradient") {
    // Oracle: direct iteration on f(x) = g*x; every step must strictly decrease x.
    Matrix p(1, 1, {0.5});
    Matrix g(1, 1, {2.0});
    AdamState st = AdamState::for_param(p);
    double prev = p[0];
    for (int i = 0; i < 50; ++i) {
        adam_step(p, g, st, 0.01);
        CHECK(p[0] < prev);
        prev = p[0];
    }
}

TEST_CASE("adam coordinates update independently") {
    Matrix joint(1, 2, {1.0, -2.0});
    Matrix jg(1, 2, {0.3, -0.7});
    AdamState jst = AdamState::for_param(joint);

    Matrix a(1, 1, {1.0}), b(1, 1, {-2.0});
    Matrix ga(1, 1, {0.3}), gb(1, 1, {-0.7});
    AdamState sta = AdamState::for_param(a), stb = AdamState::for_param(b);

    for (int i = 0; i < 25; ++i) {
        adam_step(joint, jg, jst, 0.05);
        adam_step(a, ga, sta, 0.05);
        adam_step(b, gb, stb, 0.05);
    }
    CHECK(joint[0] == a[0]);
    CHECK(joint[1] == b[0]);
}

TEST_CASE("adam rejects non-finite gradient naming the index") {
    Matrix p(1, 3);
    Matrix g(1, 3, {0.0, std::nan(""), 0.0});
    AdamState st = AdamState::for_param(p);
    CHECK_THROWS_WITH_AS(adam_step(p, g, st, 0.1), doctest::Contains("index 1"),
                         std::invalid_argument);
}

TEST_CASE("adam solves a convex quadratic to small gradient norm") {
    // min 0.5 * sum c_i x_i^2 with assorted curvatures.
    const std::vector<double> curv{0.5, 1.0, 3.0, 10.0};
    Matrix x(1, 4, {4.0, -3.0, 2.0, -1.0});
    AdamState st = AdamState::for_param(x);
    double gnorm = 1.0;
    int steps = 0;
    for (; steps < 10000; ++steps) {
        Matrix g(1, 4);
        for (std::size_t i = 0; i < 4; ++i) g[i] = curv[i] * x[i];
        gnorm = frobenius_norm(g);
        if (gnorm < 1e-6) break;
        adam_step(x, g, st, 1e-2);
    }
    CHECK(gnorm < 1e-6);
    CHECK(steps < 10000);
}

// --------------------------------------------------------------------------
// PCA
// --------------------------------------------------------------------------

TEST_CASE("pca on a single nonzero column finds that axis") {
    RngStream rng(3);
    Matrix data(40, 5);
    for (std::size_t i = 0; i < 40; ++i) data.at(i, 2) = rng.normal();
    PcaResult res = pca(data, 2);
    CHECK(res.components.at(2, 0) == doctest::Approx(1.0).epsilon(1e-9));
    for (std::size_t j : {0u, 1u, 3u, 4u})
        CHECK(std::abs(res.components.at(j, 0)) < 1e-9);
    CHECK(res.explained_variance[1] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("pca of data on the line y=x matches the 2x2 closed form") {
    // Oracle: covariance of points (t, t) is [[v, v], [v, v]] whose leading
    // eigenvector is (1,1)/sqrt(2) with eigenvalue 2v, second eigenvalue 0.
    RngStream rng(8);
    const std::size_t n = 64;
    Matrix data(n, 2);
    double mean = 0.0;
    std::vector<double> ts(n);
    for (std::size_t i = 0; i < n; ++i) {
        ts[i] = rng.uniform(-2.0, 2.0);
        data.at(i, 0) = ts[i];
        data.at(i, 1) = ts[i];
        mean += ts[i];
    }
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double t : ts) var += (t - mean) * (t - mean);
    var /= static_cast<double>(n - 1);

    PcaResult res = pca(data, 2);
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    CHECK(res.components.at(0, 0) == doctest::Approx(inv_sqrt2).epsilon(1e-9));
    CHECK(res.components.at(1, 0) == doctest::Approx(inv_sqrt2).epsilon(1e-9));
    CHECK(res.explained_variance[0] == doctest::Approx(2.0 * var).epsilon(1e-9));
    CHECK(res.explained_variance[1] == doctest::Approx(0.0).epsilon(1e-10));
}

TEST_CASE("pca components are orthonormal and reconstruction is complete") {
    RngStream rng(21);
    Matrix data = random_matrix(rng, 30, 6);
    PcaResult res = pca(data, 6);

    Matrix gram = matmul(transpose(res.components), res.components);
    CHECK(max_abs_diff(gram, Matrix::identity(6)) < 1e-8);

    // scores * components^T must reproduce the centered data.
    Matrix recon = matmul(res.scores, transpose(res.components));
    Matrix centered(30, 6);
    for (std::size_t i = 0; i < 30; ++i)
        for (std::size_t j = 0; j < 6; ++j)
            centered.at(i, j) = data.at(i, j) - res.column_means[j];
    CHECK(max_abs_diff(recon, centered) < 1e-8);

    for (std::size_t j = 0; j + 1 < res.explained_variance.size(); ++j)
        CHECK(res.explained_variance[j] >= res.explained_variance[j + 1] - 1e-12);
}

TEST_CASE("pca rejects degenerate inputs") {
    Matrix one_row(1, 3);
    CHECK_THROWS_AS(pca(one_row, 1), std::invalid_argument);
    Matrix small(4, 2);
    CHECK_THROWS_AS(pca(small, 3), std::invalid_argument);
}
