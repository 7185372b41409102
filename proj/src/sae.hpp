// Sparse autoencoder over residual-stream vectors: rectifier encoder, linear
// decoder, squared reconstruction error plus an L1 penalty on the code.
#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "numerics.hpp"

namespace saefin::sae {

struct SaeConfig {
    std::size_t input_dim = 32;   // width of the vectors being reconstructed
    std::size_t latent_dim = 64;  // usually overcomplete (> input_dim)
    double sparsity_weight = 0.05;
    double learning_rate = 3e-3;
    std::size_t epochs = 40;
    std::size_t batch_size = 64;
    std::uint64_t seed = 1;

    void validate() const;
};

struct Sae {
    SaeConfig config;
    num::Matrix encoder_weight;  // k x d
    num::Matrix encoder_bias;    // 1 x k
    num::Matrix decoder_weight;  // d x k
    num::Matrix decoder_bias;    // 1 x d

    std::vector<std::pair<std::string, num::Matrix*>> parameters();
    std::vector<std::pair<std::string, const num::Matrix*>> parameters() const;
};

// Decoder columns start as random unit vectors with the encoder tied to their
// transpose; the weights are free to drift apart during training.
Sae init_sae(const SaeConfig& config);

using SparseCode = std::vector<double>;  // latent_dim entries, all >= 0

SparseCode encode(const Sae& sae, const std::vector<double>& x);
std::vector<double> decode(const Sae& sae, const SparseCode& z);

// Row-wise encode of a dataset; returns count x latent_dim.
num::Matrix encode_batch(const Sae& sae, const num::Matrix& xs);

struct SaeMetrics {
    double reconstruction_mse = 0.0;  // mean over batch of |x - x_hat|^2
    double mean_l0 = 0.0;             // mean count of active code entries
    double mean_l1 = 0.0;             // mean |z|_1
    double loss = 0.0;                // reconstruction_mse + lambda * mean_l1
};

SaeMetrics sae_loss(const Sae& sae, const num::Matrix& batch);

struct SaeGradients {
    double loss = 0.0;
    Sae grads;
};

// Hand-derived gradients of the batch-mean loss, including the L1 subgradient
// gated through the rectifier.
SaeGradients sae_gradients(const Sae& sae, const num::Matrix& batch);

struct SaeTrainResult {
    Sae sae;
    std::vector<SaeMetrics> history;        // full-dataset metrics per epoch
    std::vector<std::size_t> dead_features; // never active over the final epoch
    SaeMetrics initial;
};

// Adam training with decoder columns renormalized to unit length after every
// step (encoder row and bias rescaled so codes compensate exactly). Flags dead
// features instead of resampling them. Aborts on sustained divergence.
SaeTrainResult train_sae(const SaeConfig& config, const num::Matrix& data);

// Mean cosine between each reference column and its greedily matched learned
// column (pairs picked by descending cosine, columns used at most once).
double greedy_match_cosine(const num::Matrix& learned_columns,
                           const num::Matrix& reference_columns);

void save_checkpoint(const Sae& sae, const std::filesystem::path& path);
Sae load_checkpoint(const std::filesystem::path& path);

// epoch,mse,l1,l0,loss rows.
void write_metrics_csv(const std::vector<SaeMetrics>& history,
                       const std::filesystem::path& path);

}  // namespace saefin::sae
