#include "sae.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

#include "io_util.hpp"

namespace saefin::sae {

using num::AdamState;
using num::Matrix;
using num::RngStream;

void SaeConfig::validate() const {
    if (input_dim < 1) throw std::invalid_argument("input_dim must be >= 1");
    if (latent_dim < 1) throw std::invalid_argument("latent_dim must be >= 1");
    if (sparsity_weight < 0.0)
        throw std::invalid_argument("sparsity_weight must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
}

std::vector<std::pair<std::string, Matrix*>> Sae::parameters() {
    return {{"encoder_weight", &encoder_weight},
            {"encoder_bias", &encoder_bias},
            {"decoder_weight", &decoder_weight},
            {"decoder_bias", &decoder_bias}};
}

std::vector<std::pair<std::string, const Matrix*>> Sae::parameters() const {
    auto mut = const_cast<Sae*>(this)->parameters();
    std::vector<std::pair<std::string, const Matrix*>> out;
    for (auto& [n, p] : mut) out.emplace_back(n, p);
    return out;
}

Sae init_sae(const SaeConfig& config) {
    config.validate();
    const std::size_t d = config.input_dim, k = config.latent_dim;
    Sae sae;
    sae.config = config;
    sae.decoder_weight = Matrix(d, k);
    RngStream rng = RngStream(config.seed).split("sae-init");
    for (std::size_t j = 0; j < k; ++j) {
        double norm_sq = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double v = rng.normal();
            sae.decoder_weight.at(i, j) = v;
            norm_sq += v * v;
        }
        const double inv = 1.0 / std::sqrt(norm_sq);
        for (std::size_t i = 0; i < d; ++i) sae.decoder_weight.at(i, j) *= inv;
    }
    sae.encoder_weight = num::transpose(sae.decoder_weight);
    sae.encoder_bias = Matrix(1, k);
    sae.decoder_bias = Matrix(1, d);
    return sae;
}

SparseCode encode(const Sae& sae, const std::vector<double>& x) {
    const std::size_t d = sae.config.input_dim, k = sae.config.latent_dim;
    if (x.size() != d)
        throw std::invalid_argument("encode: input size " + std::to_string(x.size()) +
                                    " != " + std::to_string(d));
    SparseCode z(k);
    for (std::size_t j = 0; j < k; ++j) {
        double pre = sae.encoder_bias[j];
        const double* row = sae.encoder_weight.data() + j * d;
        for (std::size_t i = 0; i < d; ++i) pre += row[i] * x[i];
        z[j] = std::max(0.0, pre);
    }
    return z;
}

std::vector<double> decode(const Sae& sae, const SparseCode& z) {
    const std::size_t d = sae.config.input_dim, k = sae.config.latent_dim;
    if (z.size() != k)
        throw std::invalid_argument("decode: code size " + std::to_string(z.size()) +
                                    " != " + std::to_string(k));
    std::vector<double> x(d);
    for (std::size_t i = 0; i < d; ++i) x[i] = sae.decoder_bias[i];
    for (std::size_t j = 0; j < k; ++j) {
        const double c = z[j];
        if (c == 0.0) continue;
        for (std::size_t i = 0; i < d; ++i) x[i] += sae.decoder_weight.at(i, j) * c;
    }
    return x;
}

num::Matrix encode_batch(const Sae& sae, const Matrix& xs) {
    const std::size_t d = sae.config.input_dim, k = sae.config.latent_dim;
    if (xs.cols() != d)
        throw std::invalid_argument("encode_batch: width " + xs.shape_str());
    Matrix z(xs.rows(), k);
    for (std::size_t r = 0; r < xs.rows(); ++r) {
        const double* x = xs.data() + r * d;
        for (std::size_t j = 0; j < k; ++j) {
            double pre = sae.encoder_bias[j];
            const double* row = sae.encoder_weight.data() + j * d;
            for (std::size_t i = 0; i < d; ++i) pre += row[i] * x[i];
            z.at(r, j) = std::max(0.0, pre);
        }
    }
    return z;
}

SaeMetrics sae_loss(const Sae& sae, const Matrix& batch) {
    const std::size_t d = sae.config.input_dim;
    if (batch.rows() == 0) throw std::invalid_argument("empty batch");
    if (batch.cols() != d)
        throw std::invalid_argument("batch width " + batch.shape_str() +
                                    " != input_dim " + std::to_string(d));
    SaeMetrics m;
    std::vector<double> x(d);
    for (std::size_t r = 0; r < batch.rows(); ++r) {
        std::copy(batch.data() + r * d, batch.data() + (r + 1) * d, x.begin());
        const SparseCode z = encode(sae, x);
        const std::vector<double> recon = decode(sae, z);
        double err = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double e = recon[i] - x[i];
            err += e * e;
        }
        m.reconstruction_mse += err;
        for (double v : z) {
            m.mean_l1 += v;
            if (v > 0.0) m.mean_l0 += 1.0;
        }
    }
    const double inv = 1.0 / static_cast<double>(batch.rows());
    m.reconstruction_mse *= inv;
    m.mean_l0 *= inv;
    m.mean_l1 *= inv;
    m.loss = m.reconstruction_mse + sae.config.sparsity_weight * m.mean_l1;
    return m;
}

SaeGradients sae_gradients(const Sae& sae, const Matrix& batch) {
    const std::size_t d = sae.config.input_dim, k = sae.config.latent_dim;
    if (batch.rows() == 0) throw std::invalid_argument("empty batch");
    if (batch.cols() != d) throw std::invalid_argument("batch width mismatch");

    SaeGradients out;
    out.grads = sae;
    for (auto& [n, p] : out.grads.parameters())
        for (std::size_t i = 0; i < p->size(); ++i) (*p)[i] = 0.0;

    const double lambda = sae.config.sparsity_weight;
    const double inv_b = 1.0 / static_cast<double>(batch.rows());
    std::vector<double> x(d), z(k), recon(d), err(d), dpre(k);
    double loss = 0.0;
    for (std::size_t r = 0; r < batch.rows(); ++r) {
        std::copy(batch.data() + r * d, batch.data() + (r + 1) * d, x.begin());
        // forward
        double l1 = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            double pre = sae.encoder_bias[j];
            const double* row = sae.encoder_weight.data() + j * d;
            for (std::size_t i = 0; i < d; ++i) pre += row[i] * x[i];
            z[j] = std::max(0.0, pre);
            l1 += z[j];
        }
        for (std::size_t i = 0; i < d; ++i) recon[i] = sae.decoder_bias[i];
        for (std::size_t j = 0; j < k; ++j) {
            if (z[j] == 0.0) continue;
            for (std::size_t i = 0; i < d; ++i)
                recon[i] += sae.decoder_weight.at(i, j) * z[j];
        }
        double sq = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            err[i] = recon[i] - x[i];
            sq += err[i] * err[i];
        }
        loss += (sq + lambda * l1) * inv_b;

        // backward
        for (std::size_t i = 0; i < d; ++i)
            out.grads.decoder_bias[i] += 2.0 * err[i] * inv_b;
        for (std::size_t j = 0; j < k; ++j) {
            if (z[j] > 0.0) {
                double back = 0.0;
                for (std::size_t i = 0; i < d; ++i) {
                    out.grads.decoder_weight.at(i, j) += 2.0 * err[i] * z[j] * inv_b;
                    back += sae.decoder_weight.at(i, j) * 2.0 * err[i];
                }
                dpre[j] = (back + lambda) * inv_b;  // L1 subgradient rides the gate
            } else {
                dpre[j] = 0.0;
            }
        }
        for (std::size_t j = 0; j < k; ++j) {
            if (dpre[j] == 0.0) continue;
            double* row = out.grads.encoder_weight.data() + j * d;
            for (std::size_t i = 0; i < d; ++i) row[i] += dpre[j] * x[i];
            out.grads.encoder_bias[j] += dpre[j];
        }
    }
    out.loss = loss;
    return out;
}

namespace {

// Unit decoder columns with the code rescaled through the encoder so the
// reconstruction is untouched; keeps the L1 penalty from being gamed by
// inflating decoder norms.
void renormalize_decoder(Sae& sae) {
    const std::size_t d = sae.config.input_dim, k = sae.config.latent_dim;
    for (std::size_t j = 0; j < k; ++j) {
        double norm_sq = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double v = sae.decoder_weight.at(i, j);
            norm_sq += v * v;
        }
        const double norm = std::sqrt(norm_sq);
        if (norm <= 1e-12) continue;
        const double inv = 1.0 / norm;
        for (std::size_t i = 0; i < d; ++i) sae.decoder_weight.at(i, j) *= inv;
        double* row = sae.encoder_weight.data() + j * d;
        for (std::size_t i = 0; i < d; ++i) row[i] *= norm;
        sae.encoder_bias[j] *= norm;
    }
}

}  // namespace

SaeTrainResult train_sae(const SaeConfig& config, const Matrix& data) {
    config.validate();
    if (data.rows() < config.batch_size)
        throw std::invalid_argument("dataset smaller than one batch");
    if (data.cols() != config.input_dim)
        throw std::invalid_argument("data width " + data.shape_str() +
                                    " != input_dim");
    if (!data.all_finite()) throw std::invalid_argument("data contains non-finite values");

    SaeTrainResult result;
    result.sae = init_sae(config);
    result.initial = sae_loss(result.sae, data);
    if (config.epochs == 0) return result;

    auto params = result.sae.parameters();
    std::vector<AdamState> states;
    for (auto& [n, p] : params) states.push_back(AdamState::for_param(*p));

    RngStream epoch_rng = RngStream(config.seed).split("sae-epochs");
    std::vector<std::size_t> order(data.rows());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    const std::size_t d = config.input_dim;
    int divergent = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        epoch_rng.shuffle(order);
        for (std::size_t start = 0; start < data.rows(); start += config.batch_size) {
            const std::size_t end = std::min(start + config.batch_size, data.rows());
            Matrix batch(end - start, d);
            for (std::size_t i = start; i < end; ++i)
                std::copy(data.data() + order[i] * d, data.data() + (order[i] + 1) * d,
                          batch.data() + (i - start) * d);
            SaeGradients g = sae_gradients(result.sae, batch);
            auto gp = g.grads.parameters();
            for (std::size_t t = 0; t < params.size(); ++t)
                num::adam_step(*params[t].second, *gp[t].second, states[t],
                               config.learning_rate);
            renormalize_decoder(result.sae);
        }
        const SaeMetrics m = sae_loss(result.sae, data);
        result.history.push_back(m);
        if (m.loss > 10.0 * result.initial.loss) {
            if (++divergent >= 3)
                throw std::runtime_error("sae training diverged: loss " +
                                         std::to_string(m.loss) + " vs initial " +
                                         std::to_string(result.initial.loss));
        } else {
            divergent = 0;
        }
    }

    // dead-feature report over the whole dataset with the final weights
    const Matrix codes = encode_batch(result.sae, data);
    std::vector<bool> active(config.latent_dim, false);
    for (std::size_t r = 0; r < codes.rows(); ++r)
        for (std::size_t j = 0; j < config.latent_dim; ++j)
            if (codes.at(r, j) > 0.0) active[j] = true;
    for (std::size_t j = 0; j < config.latent_dim; ++j)
        if (!active[j]) result.dead_features.push_back(j);
    return result;
}

double greedy_match_cosine(const Matrix& learned_columns,
                           const Matrix& reference_columns) {
    if (learned_columns.rows() != reference_columns.rows())
        throw std::invalid_argument("column dimension mismatch");
    const std::size_t d = learned_columns.rows();
    const std::size_t kl = learned_columns.cols(), kr = reference_columns.cols();

    auto column_norm = [&](const Matrix& m, std::size_t j) {
        double s = 0.0;
        for (std::size_t i = 0; i < d; ++i) s += m.at(i, j) * m.at(i, j);
        return std::sqrt(s);
    };
    struct Pair {
        double cosine;
        std::size_t learned, ref;
    };
    std::vector<Pair> pairs;
    pairs.reserve(kl * kr);
    for (std::size_t a = 0; a < kl; ++a) {
        const double na = column_norm(learned_columns, a);
        if (na <= 1e-12) continue;
        for (std::size_t b = 0; b < kr; ++b) {
            const double nb = column_norm(reference_columns, b);
            if (nb <= 1e-12) continue;
            double dp = 0.0;
            for (std::size_t i = 0; i < d; ++i)
                dp += learned_columns.at(i, a) * reference_columns.at(i, b);
            pairs.push_back({std::abs(dp) / (na * nb), a, b});
        }
    }
    std::sort(pairs.begin(), pairs.end(), [](const Pair& x, const Pair& y) {
        if (x.cosine != y.cosine) return x.cosine > y.cosine;
        if (x.ref != y.ref) return x.ref < y.ref;
        return x.learned < y.learned;
    });
    std::vector<bool> used_learned(kl, false), used_ref(kr, false);
    double total = 0.0;
    std::size_t matched = 0;
    for (const Pair& p : pairs) {
        if (used_learned[p.learned] || used_ref[p.ref]) continue;
        used_learned[p.learned] = true;
        used_ref[p.ref] = true;
        total += p.cosine;
        ++matched;
        if (matched == kr) break;
    }
    return matched == 0 ? 0.0 : total / static_cast<double>(kr);
}

void save_checkpoint(const Sae& sae, const std::filesystem::path& path) {
    io::TensorFile tf;
    nlohmann::ordered_json meta{{"kind", "sae"},
                                {"format", 1},
                                {"input_dim", sae.config.input_dim},
                                {"latent_dim", sae.config.latent_dim},
                                {"sparsity_weight", sae.config.sparsity_weight},
                                {"learning_rate", sae.config.learning_rate},
                                {"epochs", sae.config.epochs},
                                {"batch_size", sae.config.batch_size},
                                {"seed", sae.config.seed}};
    tf.meta_json = meta.dump();
    for (const auto& [name, mat] : sae.parameters()) tf.add(name, *mat);
    tf.save(path);
}

Sae load_checkpoint(const std::filesystem::path& path) {
    const io::TensorFile tf = io::TensorFile::load(path);
    const auto meta = nlohmann::json::parse(tf.meta_json);
    if (meta.at("kind") != "sae")
        throw std::runtime_error(path.string() + " is not an autoencoder checkpoint");
    SaeConfig config;
    config.input_dim = meta.at("input_dim").get<std::size_t>();
    config.latent_dim = meta.at("latent_dim").get<std::size_t>();
    config.sparsity_weight = meta.at("sparsity_weight").get<double>();
    config.learning_rate = meta.at("learning_rate").get<double>();
    config.epochs = meta.at("epochs").get<std::size_t>();
    config.batch_size = meta.at("batch_size").get<std::size_t>();
    config.seed = meta.at("seed").get<std::uint64_t>();
    Sae sae = init_sae(config);
    for (auto& [name, mat] : sae.parameters()) *mat = tf.get(name);
    return sae;
}

void write_metrics_csv(const std::vector<SaeMetrics>& history,
                       const std::filesystem::path& path) {
    io::CsvWriter w({"epoch", "mse", "l1", "l0", "loss"});
    for (std::size_t e = 0; e < history.size(); ++e) {
        const SaeMetrics& m = history[e];
        w.add_row({io::CsvWriter::format_int(static_cast<long long>(e)),
                   io::CsvWriter::format_number(m.reconstruction_mse),
                   io::CsvWriter::format_number(m.mean_l1),
                   io::CsvWriter::format_number(m.mean_l0),
                   io::CsvWriter::format_number(m.loss)});
    }
    w.write(path);
}

}  // namespace saefin::sae
