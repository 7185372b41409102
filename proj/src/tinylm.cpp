#include "tinylm.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

#include "io_util.hpp"
#include "parallel.hpp"

namespace saefin::lm {

using num::AdamState;
using num::Matrix;
using num::RngStream;

namespace {
constexpr double kNormEps = 1e-5;
}

void TinyLmConfig::validate() const {
    if (vocab_size < 2) throw std::invalid_argument("vocab_size must be >= 2");
    if (num_layers < 1) throw std::invalid_argument("num_layers must be >= 1");
    if (num_heads < 1 || hidden_dim % num_heads != 0)
        throw std::invalid_argument("hidden_dim must be divisible by num_heads");
    if (max_seq_len < 2) throw std::invalid_argument("max_seq_len must be >= 2");
}

std::vector<std::pair<std::string, Matrix*>> TinyLm::parameters() {
    std::vector<std::pair<std::string, Matrix*>> out;
    out.emplace_back("tok_emb", &tok_emb);
    out.emplace_back("pos_emb", &pos_emb);
    for (std::size_t l = 0; l < blocks.size(); ++l) {
        const std::string p = "block" + std::to_string(l) + ".";
        out.emplace_back(p + "attn_gain", &blocks[l].attn_gain);
        out.emplace_back(p + "wq", &blocks[l].wq);
        out.emplace_back(p + "wk", &blocks[l].wk);
        out.emplace_back(p + "wv", &blocks[l].wv);
        out.emplace_back(p + "wo", &blocks[l].wo);
        out.emplace_back(p + "mlp_gain", &blocks[l].mlp_gain);
        out.emplace_back(p + "w1", &blocks[l].w1);
        out.emplace_back(p + "w2", &blocks[l].w2);
    }
    out.emplace_back("head", &head);
    return out;
}

std::vector<std::pair<std::string, const Matrix*>> TinyLm::parameters() const {
    auto mutable_view = const_cast<TinyLm*>(this)->parameters();
    std::vector<std::pair<std::string, const Matrix*>> out;
    out.reserve(mutable_view.size());
    for (auto& [name, ptr] : mutable_view) out.emplace_back(name, ptr);
    return out;
}

TinyLm init_lm(const TinyLmConfig& config) {
    config.validate();
    const std::size_t d = config.hidden_dim;
    TinyLm model;
    model.config = config;
    RngStream rng = RngStream(config.seed).split("lm-init");
    auto randn = [&](std::size_t r, std::size_t c, double std) {
        Matrix m(r, c);
        for (std::size_t i = 0; i < m.size(); ++i) m[i] = std * rng.normal();
        return m;
    };
    const double init_std = 0.08;
    model.tok_emb = randn(config.vocab_size, d, init_std);
    model.pos_emb = randn(config.max_seq_len, d, init_std);
    model.blocks.resize(config.num_layers);
    for (auto& b : model.blocks) {
        b.attn_gain = Matrix(1, d, 1.0);
        b.wq = randn(d, d, init_std);
        b.wk = randn(d, d, init_std);
        b.wv = randn(d, d, init_std);
        b.wo = randn(d, d, init_std);
        b.mlp_gain = Matrix(1, d, 1.0);
        b.w1 = randn(d, 4 * d, init_std);
        b.w2 = randn(4 * d, d, init_std);
    }
    model.head = randn(d, config.vocab_size, init_std);
    return model;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

namespace {

struct LayerCache {
    Matrix r;  // stream the block actually consumed
    std::vector<double> inv_rms_attn;
    Matrix a, q, k, v;
    std::vector<Matrix> att;  // one n x n matrix per head (causal-masked)
    Matrix ctx, attn_out, h;
    std::vector<double> inv_rms_mlp;
    Matrix mlp_in, u1;  // u1 pre-rectifier
};

struct SeqCache {
    std::vector<LayerCache> layers;
    Matrix final_stream;
    Matrix logits, probs;  // n x V (training path only)
};

// normed[p] = row[p] * inv_rms[p], elementwise scaled by gain afterwards.
void rms_normalize(const Matrix& x, std::vector<double>& inv_rms, Matrix& normed) {
    const std::size_t n = x.rows(), d = x.cols();
    inv_rms.resize(n);
    normed = Matrix(n, d);
    for (std::size_t p = 0; p < n; ++p) {
        double ms = 0.0;
        for (std::size_t i = 0; i < d; ++i) ms += x.at(p, i) * x.at(p, i);
        ms = ms / static_cast<double>(d) + kNormEps;
        const double s = 1.0 / std::sqrt(ms);
        inv_rms[p] = s;
        for (std::size_t i = 0; i < d; ++i) normed.at(p, i) = x.at(p, i) * s;
    }
}

// Adds d(normed)/d(x) contributions into dx given upstream dnormed.
void rms_normalize_backward(const Matrix& x, const std::vector<double>& inv_rms,
                            const Matrix& dnormed, Matrix& dx) {
    const std::size_t n = x.rows(), d = x.cols();
    for (std::size_t p = 0; p < n; ++p) {
        const double s = inv_rms[p];
        double dot = 0.0;
        for (std::size_t i = 0; i < d; ++i) dot += dnormed.at(p, i) * x.at(p, i);
        const double coeff = dot * s * s * s / static_cast<double>(d);
        for (std::size_t i = 0; i < d; ++i)
            dx.at(p, i) += dnormed.at(p, i) * s - x.at(p, i) * coeff;
    }
}

Matrix block_forward(const TinyLm& model, std::size_t layer, const Matrix& r,
                     LayerCache* cache) {
    const auto& b = model.blocks[layer];
    const std::size_t n = r.rows(), d = r.cols();
    const std::size_t heads = model.config.num_heads;
    const std::size_t hd = d / heads;
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

    std::vector<double> inv_rms_attn;
    Matrix normed;
    rms_normalize(r, inv_rms_attn, normed);
    Matrix a(n, d);
    for (std::size_t p = 0; p < n; ++p)
        for (std::size_t i = 0; i < d; ++i)
            a.at(p, i) = normed.at(p, i) * b.attn_gain[i];

    Matrix q = num::matmul(a, b.wq);
    Matrix k = num::matmul(a, b.wk);
    Matrix v = num::matmul(a, b.wv);

    Matrix ctx(n, d);
    std::vector<Matrix> att(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * hd;
        Matrix& weights = att[h];
        weights = Matrix(n, n);
        for (std::size_t p = 0; p < n; ++p) {
            double max_score = -1e300;
            std::vector<double> scores(p + 1);
            for (std::size_t j = 0; j <= p; ++j) {
                double s = 0.0;
                for (std::size_t i = 0; i < hd; ++i)
                    s += q.at(p, off + i) * k.at(j, off + i);
                scores[j] = s * inv_sqrt_hd;
                max_score = std::max(max_score, scores[j]);
            }
            double z = 0.0;
            for (std::size_t j = 0; j <= p; ++j) {
                scores[j] = std::exp(scores[j] - max_score);
                z += scores[j];
            }
            for (std::size_t j = 0; j <= p; ++j) {
                const double w = scores[j] / z;
                weights.at(p, j) = w;
                for (std::size_t i = 0; i < hd; ++i)
                    ctx.at(p, off + i) += w * v.at(j, off + i);
            }
        }
    }
    Matrix attn_out = num::matmul(ctx, b.wo);

    Matrix h_state(n, d);
    for (std::size_t i = 0; i < h_state.size(); ++i)
        h_state[i] = r[i] + attn_out[i];

    std::vector<double> inv_rms_mlp;
    Matrix normed2;
    rms_normalize(h_state, inv_rms_mlp, normed2);
    Matrix mlp_in(n, d);
    for (std::size_t p = 0; p < n; ++p)
        for (std::size_t i = 0; i < d; ++i)
            mlp_in.at(p, i) = normed2.at(p, i) * b.mlp_gain[i];

    Matrix u1 = num::matmul(mlp_in, b.w1);
    Matrix relu_u1 = u1;
    for (std::size_t i = 0; i < relu_u1.size(); ++i)
        relu_u1[i] = std::max(0.0, relu_u1[i]);
    Matrix mlp_out = num::matmul(relu_u1, b.w2);

    Matrix out(n, d);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = attn_out[i] + mlp_out[i];

    if (cache) {
        cache->r = r;
        cache->inv_rms_attn = std::move(inv_rms_attn);
        cache->a = std::move(a);
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->att = std::move(att);
        cache->ctx = std::move(ctx);
        cache->attn_out = std::move(attn_out);
        cache->h = std::move(h_state);
        cache->inv_rms_mlp = std::move(inv_rms_mlp);
        cache->mlp_in = std::move(mlp_in);
        cache->u1 = std::move(u1);
    }
    return out;
}

void validate_tokens(const TinyLm& model, const TokenSeq& tokens) {
    if (tokens.empty()) throw std::invalid_argument("empty token sequence");
    if (tokens.size() > model.config.max_seq_len)
        throw std::invalid_argument("sequence length " + std::to_string(tokens.size()) +
                                    " exceeds max_seq_len " +
                                    std::to_string(model.config.max_seq_len));
    for (Token t : tokens) {
        if (t >= model.config.vocab_size)
            throw std::invalid_argument("token " + std::to_string(t) +
                                        " outside vocabulary of size " +
                                        std::to_string(model.config.vocab_size));
    }
}

Matrix embed(const TinyLm& model, const TokenSeq& tokens) {
    const std::size_t n = tokens.size(), d = model.config.hidden_dim;
    Matrix r(n, d);
    for (std::size_t p = 0; p < n; ++p)
        for (std::size_t i = 0; i < d; ++i)
            r.at(p, i) = model.tok_emb.at(tokens[p], i) + model.pos_emb.at(p, i);
    return r;
}

std::vector<double> softmax_row(const double* logits, std::size_t v) {
    double max_logit = logits[0];
    for (std::size_t i = 1; i < v; ++i) max_logit = std::max(max_logit, logits[i]);
    std::vector<double> probs(v);
    double z = 0.0;
    for (std::size_t i = 0; i < v; ++i) {
        probs[i] = std::exp(logits[i] - max_logit);
        z += probs[i];
    }
    for (std::size_t i = 0; i < v; ++i) probs[i] /= z;
    return probs;
}

ForwardTrace forward_core(const TinyLm& model, const TokenSeq& tokens,
                          std::optional<TapPoint> tap, const std::vector<double>& delta,
                          SeqCache* cache) {
    validate_tokens(model, tokens);
    const std::size_t m = model.config.num_layers;
    const std::size_t d = model.config.hidden_dim;
    if (tap) {
        if (tap->layer > m)
            throw std::invalid_argument("tap layer " + std::to_string(tap->layer) +
                                        " out of range 0.." + std::to_string(m));
        if (delta.size() != d)
            throw std::invalid_argument("injection delta has size " +
                                        std::to_string(delta.size()) + ", expected " +
                                        std::to_string(d));
    }

    ForwardTrace trace;
    Matrix cur = embed(model, tokens);
    trace.residuals.push_back(cur);
    auto inject = [&](std::size_t layer) {
        if (!tap || tap->layer != layer) return;
        for (std::size_t p = 0; p < cur.rows(); ++p)
            for (std::size_t i = 0; i < d; ++i) cur.at(p, i) += delta[i];
    };
    inject(0);

    if (cache) cache->layers.resize(m);
    for (std::size_t l = 0; l < m; ++l) {
        Matrix out = block_forward(model, l, cur, cache ? &cache->layers[l] : nullptr);
        for (std::size_t i = 0; i < cur.size(); ++i) cur[i] += out[i];
        trace.block_outputs.push_back(num::sub(cur, trace.residuals.back()));
        trace.residuals.push_back(cur);
        inject(l + 1);
    }

    const std::size_t n = tokens.size();
    const std::size_t v = model.config.vocab_size;
    if (cache) {
        cache->final_stream = cur;
        cache->logits = num::matmul(cur, model.head);
        cache->probs = Matrix(n, v);
        for (std::size_t p = 0; p < n; ++p) {
            auto probs = softmax_row(cache->logits.data() + p * v, v);
            for (std::size_t i = 0; i < v; ++i) cache->probs.at(p, i) = probs[i];
        }
        trace.final_logits.assign(cache->logits.data() + (n - 1) * v,
                                  cache->logits.data() + n * v);
        trace.final_distribution.assign(cache->probs.data() + (n - 1) * v,
                                        cache->probs.data() + n * v);
    } else {
        trace.final_logits.resize(v, 0.0);
        for (std::size_t i = 0; i < v; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < d; ++j)
                s += cur.at(n - 1, j) * model.head.at(j, i);
            trace.final_logits[i] = s;
        }
        trace.final_distribution = softmax_row(trace.final_logits.data(), v);
    }
    return trace;
}

}  // namespace

ForwardTrace forward(const TinyLm& model, const TokenSeq& tokens) {
    return forward_core(model, tokens, std::nullopt, {}, nullptr);
}

ForwardTrace forward_with_injection(const TinyLm& model, const TokenSeq& tokens,
                                    TapPoint tap, const std::vector<double>& delta) {
    return forward_core(model, tokens, tap, delta, nullptr);
}

Matrix block_output(const TinyLm& model, std::size_t layer, const Matrix& stream) {
    if (layer >= model.config.num_layers)
        throw std::invalid_argument("block index out of range");
    if (stream.cols() != model.config.hidden_dim)
        throw std::invalid_argument("stream width " + std::to_string(stream.cols()) +
                                    " != hidden_dim");
    return block_forward(model, layer, stream, nullptr);
}

// ---------------------------------------------------------------------------
// Loss & gradients
// ---------------------------------------------------------------------------

namespace {

TinyLm zero_like(const TinyLm& model) {
    TinyLm g = model;
    for (auto& [name, mat] : g.parameters())
        for (std::size_t i = 0; i < mat->size(); ++i) (*mat)[i] = 0.0;
    return g;
}

// Accumulates the gradient of the summed cross-entropy of one sequence into
// `grads`; returns the summed CE and the number of predicted positions.
std::pair<double, std::size_t> backward_sequence(const TinyLm& model,
                                                 const TokenSeq& tokens,
                                                 TinyLm& grads) {
    SeqCache cache;
    (void)forward_core(model, tokens, std::nullopt, {}, &cache);
    const std::size_t n = tokens.size();
    const std::size_t d = model.config.hidden_dim;
    const std::size_t v = model.config.vocab_size;
    const std::size_t heads = model.config.num_heads;
    const std::size_t hd = d / heads;
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
    const std::size_t predicted = n - 1;
    if (predicted == 0) return {0.0, 0};

    double loss = 0.0;
    Matrix dlogits(n, v);
    for (std::size_t p = 0; p + 1 < n; ++p) {
        const Token target = tokens[p + 1];
        loss -= std::log(std::max(cache.probs.at(p, target), 1e-300));
        for (std::size_t i = 0; i < v; ++i) dlogits.at(p, i) = cache.probs.at(p, i);
        dlogits.at(p, target) -= 1.0;
    }

    // head: logits = final_stream * head
    {
        Matrix head_grad = num::matmul(num::transpose(cache.final_stream), dlogits);
        for (std::size_t i = 0; i < head_grad.size(); ++i)
            grads.head[i] += head_grad[i];
    }
    Matrix dr = num::matmul(dlogits, num::transpose(model.head));

    for (std::size_t l = model.config.num_layers; l-- > 0;) {
        const auto& b = model.blocks[l];
        auto& gb = grads.blocks[l];
        const LayerCache& C = cache.layers[l];

        // r_{l+1} = h + relu(u1) w2
        Matrix relu_u1 = C.u1;
        for (std::size_t i = 0; i < relu_u1.size(); ++i)
            relu_u1[i] = std::max(0.0, relu_u1[i]);
        {
            Matrix w2_grad = num::matmul(num::transpose(relu_u1), dr);
            for (std::size_t i = 0; i < w2_grad.size(); ++i) gb.w2[i] += w2_grad[i];
        }
        Matrix du1 = num::matmul(dr, num::transpose(b.w2));
        for (std::size_t i = 0; i < du1.size(); ++i)
            if (C.u1[i] <= 0.0) du1[i] = 0.0;
        {
            Matrix w1_grad = num::matmul(num::transpose(C.mlp_in), du1);
            for (std::size_t i = 0; i < w1_grad.size(); ++i) gb.w1[i] += w1_grad[i];
        }
        Matrix dmlp_in = num::matmul(du1, num::transpose(b.w1));

        // mlp_in = rmsnorm(h) ⊙ mlp_gain
        Matrix dh = dr;  // path through the residual add
        {
            Matrix dnormed(n, d);
            for (std::size_t p = 0; p < n; ++p) {
                const double s = C.inv_rms_mlp[p];
                for (std::size_t i = 0; i < d; ++i) {
                    gb.mlp_gain[i] += dmlp_in.at(p, i) * C.h.at(p, i) * s;
                    dnormed.at(p, i) = dmlp_in.at(p, i) * b.mlp_gain[i];
                }
            }
            rms_normalize_backward(C.h, C.inv_rms_mlp, dnormed, dh);
        }

        // h = r + ctx wo
        Matrix dr_prev = dh;  // direct residual path
        {
            Matrix wo_grad = num::matmul(num::transpose(C.ctx), dh);
            for (std::size_t i = 0; i < wo_grad.size(); ++i) gb.wo[i] += wo_grad[i];
        }
        Matrix dctx = num::matmul(dh, num::transpose(b.wo));

        Matrix dq(n, d), dk(n, d), dv(n, d);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * hd;
            const Matrix& att = C.att[h];
            for (std::size_t p = 0; p < n; ++p) {
                // datt[p,j] = dctx_h[p] . v_h[j]
                std::vector<double> datt(p + 1);
                double rowdot = 0.0;
                for (std::size_t j = 0; j <= p; ++j) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < hd; ++i)
                        s += dctx.at(p, off + i) * C.v.at(j, off + i);
                    datt[j] = s;
                    rowdot += att.at(p, j) * s;
                    for (std::size_t i = 0; i < hd; ++i)
                        dv.at(j, off + i) += att.at(p, j) * dctx.at(p, off + i);
                }
                for (std::size_t j = 0; j <= p; ++j) {
                    const double dscore = att.at(p, j) * (datt[j] - rowdot) * inv_sqrt_hd;
                    for (std::size_t i = 0; i < hd; ++i) {
                        dq.at(p, off + i) += dscore * C.k.at(j, off + i);
                        dk.at(j, off + i) += dscore * C.q.at(p, off + i);
                    }
                }
            }
        }

        Matrix da = num::matmul(dq, num::transpose(b.wq));
        {
            Matrix wq_grad = num::matmul(num::transpose(C.a), dq);
            for (std::size_t i = 0; i < wq_grad.size(); ++i) gb.wq[i] += wq_grad[i];
            Matrix wk_grad = num::matmul(num::transpose(C.a), dk);
            for (std::size_t i = 0; i < wk_grad.size(); ++i) gb.wk[i] += wk_grad[i];
            Matrix wv_grad = num::matmul(num::transpose(C.a), dv);
            for (std::size_t i = 0; i < wv_grad.size(); ++i) gb.wv[i] += wv_grad[i];
        }
        {
            Matrix tmp = num::matmul(dk, num::transpose(b.wk));
            for (std::size_t i = 0; i < da.size(); ++i) da[i] += tmp[i];
            tmp = num::matmul(dv, num::transpose(b.wv));
            for (std::size_t i = 0; i < da.size(); ++i) da[i] += tmp[i];
        }

        // a = rmsnorm(r) ⊙ attn_gain
        {
            Matrix dnormed(n, d);
            for (std::size_t p = 0; p < n; ++p) {
                const double s = C.inv_rms_attn[p];
                for (std::size_t i = 0; i < d; ++i) {
                    gb.attn_gain[i] += da.at(p, i) * C.r.at(p, i) * s;
                    dnormed.at(p, i) = da.at(p, i) * b.attn_gain[i];
                }
            }
            rms_normalize_backward(C.r, C.inv_rms_attn, dnormed, dr_prev);
        }
        dr = std::move(dr_prev);
    }

    for (std::size_t p = 0; p < n; ++p) {
        for (std::size_t i = 0; i < d; ++i) {
            grads.tok_emb.at(tokens[p], i) += dr.at(p, i);
            grads.pos_emb.at(p, i) += dr.at(p, i);
        }
    }
    return {loss, predicted};
}

}  // namespace

LmGradients lm_loss_and_gradients(const TinyLm& model,
                                  const std::vector<TokenSeq>& batch) {
    LmGradients out;
    out.grads = zero_like(model);

    // per-sequence buffers, reduced in index order so the result does not
    // depend on worker scheduling
    std::vector<TinyLm> buffers(batch.size(), out.grads);
    std::vector<double> losses(batch.size(), 0.0);
    std::vector<std::size_t> counts(batch.size(), 0);
    parallel_for(batch.size(), [&](std::size_t i) {
        auto [loss, count] = backward_sequence(model, batch[i], buffers[i]);
        losses[i] = loss;
        counts[i] = count;
    });

    double loss_sum = 0.0;
    std::size_t positions = 0;
    auto grad_params = out.grads.parameters();
    for (std::size_t i = 0; i < batch.size(); ++i) {
        loss_sum += losses[i];
        positions += counts[i];
        auto buffer_params = buffers[i].parameters();
        for (std::size_t t = 0; t < grad_params.size(); ++t) {
            num::Matrix& acc = *grad_params[t].second;
            const num::Matrix& add = *buffer_params[t].second;
            for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += add[j];
        }
    }
    if (positions == 0) throw std::invalid_argument("batch has no predictable positions");
    const double inv = 1.0 / static_cast<double>(positions);
    out.loss = loss_sum * inv;
    for (auto& [name, mat] : out.grads.parameters())
        for (std::size_t i = 0; i < mat->size(); ++i) (*mat)[i] *= inv;
    return out;
}

double evaluate_ce(const TinyLm& model, const std::vector<TokenSeq>& sequences) {
    if (sequences.empty()) throw std::invalid_argument("no sequences to evaluate");
    std::vector<double> losses(sequences.size(), 0.0);
    std::vector<std::size_t> counts(sequences.size(), 0);
    parallel_for(sequences.size(), [&](std::size_t s) {
        SeqCache cache;
        (void)forward_core(model, sequences[s], std::nullopt, {}, &cache);
        const TokenSeq& tokens = sequences[s];
        double loss = 0.0;
        for (std::size_t p = 0; p + 1 < tokens.size(); ++p)
            loss -= std::log(std::max(cache.probs.at(p, tokens[p + 1]), 1e-300));
        losses[s] = loss;
        counts[s] = tokens.size() - 1;
    });
    double total = 0.0;
    std::size_t positions = 0;
    for (std::size_t s = 0; s < sequences.size(); ++s) {
        total += losses[s];
        positions += counts[s];
    }
    if (positions == 0) throw std::invalid_argument("no predictable positions");
    return total / static_cast<double>(positions);
}

LmTrainResult train_lm(const TinyLmConfig& config, const std::vector<TokenSeq>& corpus,
                       const LmTrainOptions& options) {
    if (corpus.empty()) throw std::invalid_argument("training corpus is empty");
    LmTrainResult result;
    result.model = init_lm(config);

    // deterministic holdout split
    std::vector<std::size_t> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    RngStream split_rng = RngStream(config.seed).split("lm-holdout");
    split_rng.shuffle(order);
    std::size_t holdout_count = static_cast<std::size_t>(
        options.holdout_fraction * static_cast<double>(corpus.size()));
    holdout_count = std::min(holdout_count, corpus.size() - 1);
    std::vector<TokenSeq> train, holdout;
    for (std::size_t i = 0; i < order.size(); ++i) {
        if (i < corpus.size() - holdout_count) train.push_back(corpus[order[i]]);
        else holdout.push_back(corpus[order[i]]);
    }
    if (holdout.empty()) holdout = train;

    result.initial_loss = evaluate_ce(result.model, train);
    if (options.epochs == 0) {
        result.holdout_ce = evaluate_ce(result.model, holdout);
        return result;
    }

    auto params = result.model.parameters();
    std::vector<AdamState> states;
    states.reserve(params.size());
    for (auto& [name, mat] : params) states.push_back(AdamState::for_param(*mat));

    RngStream epoch_rng = RngStream(config.seed).split("lm-epochs");
    std::vector<std::size_t> train_order(train.size());
    for (std::size_t i = 0; i < train_order.size(); ++i) train_order[i] = i;

    int divergent_epochs = 0;
    for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
        epoch_rng.shuffle(train_order);
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < train.size(); start += options.batch_size) {
            std::vector<TokenSeq> batch;
            const std::size_t end = std::min(start + options.batch_size, train.size());
            for (std::size_t i = start; i < end; ++i) batch.push_back(train[train_order[i]]);
            LmGradients g = lm_loss_and_gradients(result.model, batch);
            auto gparams = g.grads.parameters();
            for (std::size_t t = 0; t < params.size(); ++t)
                num::adam_step(*params[t].second, *gparams[t].second, states[t],
                               options.learning_rate);
            epoch_loss += g.loss;
            ++batches;
        }
        epoch_loss /= static_cast<double>(batches);
        result.epoch_losses.push_back(epoch_loss);

        if (epoch_loss > 10.0 * result.initial_loss) {
            if (++divergent_epochs >= 3)
                throw std::runtime_error(
                    "language model training diverged: loss " +
                    std::to_string(epoch_loss) + " vs initial " +
                    std::to_string(result.initial_loss) + " for 3 consecutive epochs");
        } else {
            divergent_epochs = 0;
        }
    }
    result.holdout_ce = evaluate_ce(result.model, holdout);
    return result;
}

// ---------------------------------------------------------------------------
// Residual collection & sampling
// ---------------------------------------------------------------------------

ResidualDataset collect_residuals(const TinyLm& model,
                                  const std::vector<TokenSeq>& corpus, TapPoint tap) {
    if (tap.layer > model.config.num_layers)
        throw std::invalid_argument("tap layer out of range");
    std::size_t total = 0;
    for (const auto& seq : corpus) total += seq.size();

    ResidualDataset ds;
    ds.vectors = Matrix(total, model.config.hidden_dim);
    ds.provenance.resize(total);
    std::vector<std::size_t> offsets(corpus.size());
    std::size_t off = 0;
    for (std::size_t s = 0; s < corpus.size(); ++s) {
        offsets[s] = off;
        off += corpus[s].size();
    }
    parallel_for(corpus.size(), [&](std::size_t s) {
        const ForwardTrace trace = forward(model, corpus[s]);
        const Matrix& stream = trace.residuals[tap.layer];
        const std::size_t base = offsets[s];
        for (std::size_t p = 0; p < corpus[s].size(); ++p) {
            for (std::size_t i = 0; i < stream.cols(); ++i)
                ds.vectors.at(base + p, i) = stream.at(p, i);
            ds.provenance[base + p] = {static_cast<std::uint64_t>(s),
                                       static_cast<std::uint32_t>(p)};
        }
    });
    return ds;
}

Token sample_next(const std::vector<double>& distribution, SamplingMode mode,
                  double temperature, RngStream& rng) {
    if (distribution.empty()) throw std::invalid_argument("empty distribution");
    if (mode == SamplingMode::Greedy) {
        std::size_t arg = 0;
        for (std::size_t i = 1; i < distribution.size(); ++i)
            if (distribution[i] > distribution[arg]) arg = i;
        return static_cast<Token>(arg);
    }
    if (temperature <= 0.0) throw std::invalid_argument("temperature must be positive");
    std::vector<double> w(distribution.size());
    double z = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] = std::pow(std::max(distribution[i], 0.0), 1.0 / temperature);
        z += w[i];
    }
    const double u = rng.uniform01() * z;
    double acc = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        acc += w[i];
        if (u < acc) return static_cast<Token>(i);
    }
    return static_cast<Token>(w.size() - 1);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void save_checkpoint(const TinyLm& model, const std::filesystem::path& path) {
    io::TensorFile tf;
    nlohmann::ordered_json meta{{"kind", "tinylm"},
                                {"format", 1},
                                {"vocab_size", model.config.vocab_size},
                                {"hidden_dim", model.config.hidden_dim},
                                {"num_layers", model.config.num_layers},
                                {"num_heads", model.config.num_heads},
                                {"max_seq_len", model.config.max_seq_len},
                                {"seed", model.config.seed}};
    tf.meta_json = meta.dump();
    for (const auto& [name, mat] : model.parameters()) tf.add(name, *mat);
    tf.save(path);
}

TinyLm load_checkpoint(const std::filesystem::path& path) {
    const io::TensorFile tf = io::TensorFile::load(path);
    const auto meta = nlohmann::json::parse(tf.meta_json);
    if (meta.at("kind") != "tinylm")
        throw std::runtime_error(path.string() + " is not a language model checkpoint");
    TinyLmConfig config;
    config.vocab_size = meta.at("vocab_size").get<std::uint32_t>();
    config.hidden_dim = meta.at("hidden_dim").get<std::size_t>();
    config.num_layers = meta.at("num_layers").get<std::size_t>();
    config.num_heads = meta.at("num_heads").get<std::size_t>();
    config.max_seq_len = meta.at("max_seq_len").get<std::size_t>();
    config.seed = meta.at("seed").get<std::uint64_t>();
    TinyLm model = init_lm(config);
    for (auto& [name, mat] : model.parameters()) *mat = tf.get(name);
    return model;
}

}  // namespace saefin::lm
