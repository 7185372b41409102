// A small trainable decoder-only transformer exposing residual-stream taps.
// Blocks are pre-norm, so the stream recorded between blocks satisfies the
// clean update r[l+1] = r[l] + block_l(r[l]) exactly, and the output head is
// purely linear on the final stream.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "numerics.hpp"

namespace saefin::lm {

using Token = std::uint32_t;
using TokenSeq = std::vector<Token>;

struct TinyLmConfig {
    std::uint32_t vocab_size = 64;
    std::size_t hidden_dim = 32;
    std::size_t num_layers = 4;
    std::size_t num_heads = 2;
    std::size_t max_seq_len = 48;
    std::uint64_t seed = 1;

    void validate() const;  // throws std::invalid_argument
};

struct BlockParams {
    num::Matrix attn_gain;  // 1 x d (rms-norm scale)
    num::Matrix wq, wk, wv, wo;  // d x d
    num::Matrix mlp_gain;   // 1 x d
    num::Matrix w1;         // d x 4d
    num::Matrix w2;         // 4d x d
};

struct TinyLm {
    TinyLmConfig config;
    num::Matrix tok_emb;  // V x d
    num::Matrix pos_emb;  // max_seq_len x d
    std::vector<BlockParams> blocks;
    num::Matrix head;     // d x V

    // Stable iteration order over all parameter tensors; used by the
    // optimizer, the checkpoint writer, and the finite-difference check.
    std::vector<std::pair<std::string, num::Matrix*>> parameters();
    std::vector<std::pair<std::string, const num::Matrix*>> parameters() const;
};

TinyLm init_lm(const TinyLmConfig& config);

// Residual stream read/write location: tap l is the stream entering block l,
// with tap == num_layers addressing the stream entering the output head.
struct TapPoint {
    std::size_t layer = 0;
};

struct ForwardTrace {
    // residuals[l] is the n x d stream at tap l, l = 0..m. For injected runs
    // these are the pre-injection values, so earlier layers compare
    // bit-exactly against an uninjected forward.
    std::vector<num::Matrix> residuals;
    // block_outputs[l] = residuals[l+1] - residuals[l] as computed, n x d.
    std::vector<num::Matrix> block_outputs;
    std::vector<double> final_logits;        // V, last position
    std::vector<double> final_distribution;  // V, softmax of final_logits
};

ForwardTrace forward(const TinyLm& model, const TokenSeq& tokens);

// Forward with `delta` added to the stream at the tap (every position) before
// the remaining blocks run. A zero delta reproduces forward() bit-exactly.
ForwardTrace forward_with_injection(const TinyLm& model, const TokenSeq& tokens,
                                    TapPoint tap, const std::vector<double>& delta);

// Standalone re-evaluation of one block on a given stream; the oracle for the
// residual-update identity.
num::Matrix block_output(const TinyLm& model, std::size_t layer,
                         const num::Matrix& stream);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct LmTrainOptions {
    std::size_t epochs = 4;
    double learning_rate = 3e-3;
    std::size_t batch_size = 16;
    double holdout_fraction = 0.1;
};

struct LmTrainResult {
    TinyLm model;
    std::vector<double> epoch_losses;  // training CE per epoch
    double holdout_ce = 0.0;           // nats/token on the held-out split
    double initial_loss = 0.0;
};

// Next-token cross-entropy training with Adam. Aborts with a diagnostic when
// the loss exceeds 10x the initial value for 3 consecutive epochs.
LmTrainResult train_lm(const TinyLmConfig& config,
                       const std::vector<TokenSeq>& corpus,
                       const LmTrainOptions& options);

// Mean next-token cross-entropy of the model on a set of sequences.
double evaluate_ce(const TinyLm& model, const std::vector<TokenSeq>& sequences);

// Cross-entropy and parameter gradients for one batch; exposed for the
// finite-difference oracle.
struct LmGradients {
    double loss = 0.0;
    TinyLm grads;  // same shapes as the model, gradient values
};
LmGradients lm_loss_and_gradients(const TinyLm& model,
                                  const std::vector<TokenSeq>& batch);

// ---------------------------------------------------------------------------
// Residual collection & sampling
// ---------------------------------------------------------------------------

struct ResidualProvenance {
    std::uint64_t sequence = 0;
    std::uint32_t position = 0;
};

struct ResidualDataset {
    num::Matrix vectors;  // count x d
    std::vector<ResidualProvenance> provenance;
    std::size_t dim() const { return vectors.cols(); }
    std::size_t count() const { return vectors.rows(); }
};

// One stream vector per (sequence, position) at the tap, in corpus order.
ResidualDataset collect_residuals(const TinyLm& model,
                                  const std::vector<TokenSeq>& corpus, TapPoint tap);

enum class SamplingMode { Greedy, Temperature };

// Next-token choice given a distribution; temperature sampling draws from the
// provided sub-stream so experiments stay reproducible.
Token sample_next(const std::vector<double>& distribution, SamplingMode mode,
                  double temperature, num::RngStream& rng);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void save_checkpoint(const TinyLm& model, const std::filesystem::path& path);
TinyLm load_checkpoint(const std::filesystem::path& path);

}  // namespace saefin::lm
