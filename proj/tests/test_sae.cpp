#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "datasim.hpp"
#include "numerics.hpp"
#include "io_util.hpp"
#include "sae.hpp"

using namespace saefin;
using namespace saefin::sae;

namespace {

SaeConfig small_config(std::uint64_t seed = 1) {
    SaeConfig c;
    c.input_dim = 3;
    c.latent_dim = 4;
    c.sparsity_weight = 0.1;
    c.seed = seed;
    return c;
}

Sae random_sae(const SaeConfig& config, std::uint64_t seed) {
    Sae s = init_sae(config);
    num::RngStream rng(seed);
    for (auto& [n, p] : s.parameters())
        for (std::size_t i = 0; i < p->size(); ++i) (*p)[i] = 0.5 * rng.normal();
    return s;
}

bool saes_equal(const Sae& a, const Sae& b) {
    auto pa = a.parameters(), pb = b.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) {
        if (!pa[i].second->same_shape(*pb[i].second)) return false;
        if (num::max_abs_diff(*pa[i].second, *pb[i].second) != 0.0) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("encode: zero map and rectifier cutoff") {
    Sae s = init_sae(small_config());
    s.encoder_weight = num::Matrix(4, 3);
    s.encoder_bias = num::Matrix(1, 4);
    SparseCode z = encode(s, {1.0, -2.0, 3.0});
    for (double v : z) CHECK(v == 0.0);

    s = random_sae(small_config(), 5);
    for (std::size_t j = 0; j < 4; ++j) s.encoder_bias[j] = -1e6;
    z = encode(s, {1.0, -2.0, 3.0});
    for (double v : z) CHECK(v == 0.0);
}

TEST_CASE("encode matches a hand computation on a 4x3 case") {
    Sae s = random_sae(small_config(), 7);
    const std::vector<double> x{0.4, -1.2, 0.7};
    const SparseCode z = encode(s, x);
    for (std::size_t j = 0; j < 4; ++j) {
        double pre = s.encoder_bias[j];
        for (std::size_t i = 0; i < 3; ++i) pre += s.encoder_weight.at(j, i) * x[i];
        const double expect = pre > 0.0 ? pre : 0.0;
        CHECK(z[j] == doctest::Approx(expect).epsilon(1e-12));
        CHECK(z[j] >= 0.0);
    }
}

TEST_CASE("decode: bias only, basis extraction, linearity in the column") {
    const Sae s = random_sae(small_config(), 9);
    const std::vector<double> at_zero = decode(s, {0, 0, 0, 0});
    for (std::size_t i = 0; i < 3; ++i) CHECK(at_zero[i] == s.decoder_bias[i]);

    for (std::size_t j = 0; j < 4; ++j) {
        SparseCode unit(4, 0.0);
        unit[j] = 1.0;
        const std::vector<double> out = decode(s, unit);
        for (std::size_t i = 0; i < 3; ++i)
            CHECK(out[i] == doctest::Approx(s.decoder_weight.at(i, j) +
                                            s.decoder_bias[i]).epsilon(1e-12));
    }

    // decode(s·e_j) - decode(0) == s * column j, the steering primitive
    for (std::size_t j = 0; j < 4; ++j) {
        for (double scale : {-2.0, 0.5, 3.0}) {
            SparseCode code(4, 0.0);
            code[j] = scale;
            const std::vector<double> out = decode(s, code);
            for (std::size_t i = 0; i < 3; ++i)
                CHECK(std::abs(out[i] - at_zero[i] - scale * s.decoder_weight.at(i, j)) <
                      1e-9);
        }
    }
}

TEST_CASE("encode/decode reject dimension mismatches") {
    const Sae s = init_sae(small_config());
    CHECK_THROWS_AS(encode(s, {1.0, 2.0}), std::invalid_argument);
    CHECK_THROWS_AS(decode(s, {1.0, 2.0}), std::invalid_argument);
}

TEST_CASE("loss: exact reconstruction of the decoder bias is zero") {
    SaeConfig config = small_config();
    config.sparsity_weight = 0.0;
    Sae s = init_sae(config);
    s.encoder_weight = num::Matrix(4, 3);
    s.encoder_bias = num::Matrix(1, 4);
    s.decoder_bias = num::Matrix(1, 3, {0.3, -0.4, 0.9});
    num::Matrix batch(1, 3, {0.3, -0.4, 0.9});
    const SaeMetrics m = sae_loss(s, batch);
    CHECK(m.loss == 0.0);
    CHECK(m.reconstruction_mse == 0.0);
    CHECK(m.mean_l0 == 0.0);
}

TEST_CASE("loss decomposition and linearity in the penalty weight") {
    Sae s = random_sae(small_config(), 11);
    num::RngStream rng(12);
    num::Matrix batch(6, 3);
    for (std::size_t i = 0; i < batch.size(); ++i) batch[i] = rng.normal();

    s.config.sparsity_weight = 0.0;
    const SaeMetrics plain = sae_loss(s, batch);
    CHECK(plain.loss == plain.reconstruction_mse);

    s.config.sparsity_weight = 0.1;
    const SaeMetrics l1 = sae_loss(s, batch);
    CHECK(std::abs(l1.loss - (l1.reconstruction_mse + 0.1 * l1.mean_l1)) < 1e-9);

    s.config.sparsity_weight = 0.2;
    const SaeMetrics l2 = sae_loss(s, batch);
    // doubling lambda with frozen weights adds exactly lambda * mean |z|_1
    CHECK(l2.loss - l1.loss == doctest::Approx(0.1 * l1.mean_l1).epsilon(1e-12));
    CHECK(l2.mean_l0 <= s.config.latent_dim);
}

TEST_CASE("gradients vanish at a perfect reconstruction optimum") {
    SaeConfig config = small_config();
    config.sparsity_weight = 0.0;
    Sae s = init_sae(config);
    s.encoder_weight = num::Matrix(4, 3);
    s.encoder_bias = num::Matrix(1, 4);
    s.decoder_bias = num::Matrix(1, 3, {0.3, -0.4, 0.9});
    num::Matrix batch(1, 3, {0.3, -0.4, 0.9});
    const SaeGradients g = sae_gradients(s, batch);
    CHECK(g.loss == 0.0);
    for (const auto& [name, mat] : g.grads.parameters())
        for (std::size_t i = 0; i < mat->size(); ++i) CHECK((*mat)[i] == 0.0);
}

TEST_CASE("gradients match central finite differences away from the kink") {
    SaeConfig config;
    config.input_dim = 5;
    config.latent_dim = 8;
    config.sparsity_weight = 0.07;
    Sae s = random_sae(config, 21);
    num::RngStream rng(22);
    num::Matrix batch(4, 5);
    for (std::size_t i = 0; i < batch.size(); ++i) batch[i] = rng.normal();

    const SaeGradients analytic = sae_gradients(s, batch);
    auto params = s.parameters();
    auto grads = analytic.grads.parameters();

    // guard: only probe encoder rows whose pre-activations are clear of zero
    auto row_clear_of_kink = [&](std::size_t j) {
        for (std::size_t r = 0; r < batch.rows(); ++r) {
            double pre = s.encoder_bias[j];
            for (std::size_t i = 0; i < 5; ++i)
                pre += s.encoder_weight.at(j, i) * batch.at(r, i);
            if (std::abs(pre) < 1e-3) return false;
        }
        return true;
    };

    const double eps = 1e-6;
    int checked = 0, attempts = 0;
    while (checked < 32 && attempts < 400) {
        ++attempts;
        const std::size_t t = rng.next_below(params.size());
        num::Matrix& mat = *params[t].second;
        const std::size_t idx = rng.next_below(mat.size());
        if (t == 0 && !row_clear_of_kink(idx / 5)) continue;
        if (t == 1 && !row_clear_of_kink(idx)) continue;

        const double saved = mat[idx];
        mat[idx] = saved + eps;
        const double up = sae_gradients(s, batch).loss;
        mat[idx] = saved - eps;
        const double down = sae_gradients(s, batch).loss;
        mat[idx] = saved;
        const double numeric = (up - down) / (2.0 * eps);
        const double a = (*grads[t].second)[idx];
        if (std::abs(a) < 1e-9 && std::abs(numeric) < 1e-9) continue;
        const double rel =
            std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
        CHECK(rel < 1e-4);
        ++checked;
    }
    CHECK(checked == 32);
}

TEST_CASE("L1 subgradient contributes exactly lambda through active codes") {
    // 2x2 case with both features active: the encoder-bias gradient under
    // lambda differs from the lambda = 0 gradient by exactly lambda (dz/db = 1).
    SaeConfig config;
    config.input_dim = 2;
    config.latent_dim = 2;
    Sae s = init_sae(config);
    s.encoder_weight = num::Matrix(2, 2, {1.0, 0.0, 0.0, 1.0});
    s.encoder_bias = num::Matrix(1, 2, {0.5, 0.5});
    num::Matrix batch(1, 2, {1.0, 2.0});  // both pre-activations positive

    s.config.sparsity_weight = 0.0;
    const SaeGradients base = sae_gradients(s, batch);
    s.config.sparsity_weight = 0.3;
    const SaeGradients with_l1 = sae_gradients(s, batch);
    for (std::size_t j = 0; j < 2; ++j)
        CHECK(with_l1.grads.encoder_bias[j] - base.grads.encoder_bias[j] ==
              doctest::Approx(0.3).epsilon(1e-12));
}

TEST_CASE("training with zero epochs returns the initialization") {
    SaeConfig config;
    config.input_dim = 4;
    config.latent_dim = 6;
    config.epochs = 0;
    config.batch_size = 4;
    num::RngStream rng(31);
    num::Matrix data(32, 4);
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = rng.normal();
    const SaeTrainResult r = train_sae(config, data);
    CHECK(saes_equal(r.sae, init_sae(config)));
}

TEST_CASE("codes stay non-negative everywhere") {
    const Sae s = random_sae(small_config(), 41);
    num::RngStream rng(42);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> x{rng.normal(), rng.normal(), rng.normal()};
        for (double v : encode(s, x)) CHECK(v >= 0.0);
    }
}

TEST_CASE("lambda sweep: mean L0 is non-increasing in the penalty") {
    const datasim::ResidualGenSpec gen{.dim = 16,
                                       .num_components = 8,
                                       .expected_active = 2.0,
                                       .noise_scale = 0.02,
                                       .seed = 55};
    const datasim::ResidualSample sample = datasim::generate_residual_dataset(gen, 2048);

    double prev_l0 = 1e300;
    for (double lambda : {0.0, 0.01, 0.1, 1.0}) {
        SaeConfig config;
        config.input_dim = 16;
        config.latent_dim = 32;
        config.sparsity_weight = lambda;
        config.epochs = 12;
        config.seed = 7;
        const SaeTrainResult r = train_sae(config, sample.vectors);
        const double l0 = r.history.back().mean_l0;
        CHECK(l0 <= prev_l0 + 1e-9);
        prev_l0 = l0;
        CHECK(r.history.back().loss <= r.initial.loss);
    }
}

TEST_CASE("planted dictionary is recovered with high matched cosine") {
    const datasim::ResidualGenSpec gen{.dim = 32,
                                       .num_components = 16,
                                       .expected_active = 3.0,
                                       .noise_scale = 0.05,
                                       .seed = 77};
    const datasim::ResidualSample sample = datasim::generate_residual_dataset(gen, 8192);

    SaeConfig config;
    config.input_dim = 32;
    config.latent_dim = 64;
    config.sparsity_weight = 0.01;
    config.epochs = 40;
    config.seed = 3;
    const SaeTrainResult r = train_sae(config, sample.vectors);

    const double cosine =
        greedy_match_cosine(r.sae.decoder_weight, sample.truth.dictionary);
    CHECK(cosine > 0.9);

    // encode-decode relative error on clean planted inputs (pure dictionary
    // combinations, no observation noise)
    double rel_err_sum = 0.0;
    std::size_t n_checked = 0;
    for (std::size_t i = 0; i < 200; ++i) {
        std::vector<double> x(32, 0.0);
        for (std::size_t c = 0; c < gen.num_components; ++c) {
            const double coef = sample.codes.at(i, c);
            if (coef == 0.0) continue;
            for (std::size_t j = 0; j < 32; ++j)
                x[j] += coef * sample.truth.dictionary.at(j, c);
        }
        const std::vector<double> recon = decode(r.sae, encode(r.sae, x));
        double err = 0.0, norm = 0.0;
        for (std::size_t j = 0; j < 32; ++j) {
            err += (recon[j] - x[j]) * (recon[j] - x[j]);
            norm += x[j] * x[j];
        }
        if (norm > 1e-12) {
            rel_err_sum += std::sqrt(err / norm);
            ++n_checked;
        }
    }
    CHECK(rel_err_sum / double(n_checked) < 0.1);
}

TEST_CASE("checkpoint and metrics history round-trip") {
    const Sae s = random_sae(small_config(13), 61);
    const auto path = std::filesystem::temp_directory_path() / "saefin_sae_test.ckpt";
    save_checkpoint(s, path);
    const Sae back = load_checkpoint(path);
    CHECK(saes_equal(s, back));
    CHECK(back.config.sparsity_weight == s.config.sparsity_weight);

    std::vector<SaeMetrics> history{{1.0, 2.0, 3.0, 1.3}, {0.5, 1.5, 2.5, 0.65}};
    const auto csv = std::filesystem::temp_directory_path() / "saefin_sae_metrics.csv";
    write_metrics_csv(history, csv);
    const auto table = io::read_csv(csv);
    CHECK(table.header == std::vector<std::string>{"epoch", "mse", "l1", "l0", "loss"});
    CHECK(table.rows.size() == 2);
    CHECK(table.rows[1][0] == "1");
}
