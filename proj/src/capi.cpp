#include "saefin/saefin.h"

#include <cstring>
#include <filesystem>
#include <string>

#include "pipeline.hpp"
#include "sae.hpp"
#include "steering.hpp"
#include "tinylm.hpp"

using saefin::pipeline::ConfigError;

struct saefin_model {
    saefin::lm::TinyLm model;
};

struct saefin_sae {
    saefin::sae::Sae sae;
};

namespace {

thread_local std::string t_last_error = "";

saefin_status fail(saefin_status code, const std::string& message) {
    t_last_error = message;
    return code;
}

// Runs fn, translating exceptions into status codes.
template <typename Fn>
saefin_status guarded(Fn&& fn) {
    try {
        fn();
        return SAEFIN_OK;
    } catch (const ConfigError& e) {
        return fail(SAEFIN_ERR_CONFIG, e.what());
    } catch (const std::invalid_argument& e) {
        return fail(SAEFIN_ERR_INVALID_ARGUMENT, e.what());
    } catch (const std::filesystem::filesystem_error& e) {
        return fail(SAEFIN_ERR_IO, e.what());
    } catch (const std::exception& e) {
        return fail(SAEFIN_ERR_RUNTIME, e.what());
    } catch (...) {
        return fail(SAEFIN_ERR_RUNTIME, "unknown error");
    }
}

saefin_status require(bool condition, const char* message) {
    if (condition) return SAEFIN_OK;
    return fail(SAEFIN_ERR_INVALID_ARGUMENT, message);
}

}  // namespace

extern "C" {

const char* saefin_version(void) { return saefin::pipeline::kVersion; }

const char* saefin_last_error(void) { return t_last_error.c_str(); }

saefin_status saefin_default_config(char* buffer, size_t buffer_len, size_t* needed) {
    if (!needed) return fail(SAEFIN_ERR_INVALID_ARGUMENT, "needed must not be NULL");
    return guarded([&]() {
        const std::string text =
            saefin::pipeline::config_to_json(saefin::pipeline::ExperimentConfig{});
        *needed = text.size() + 1;
        if (buffer && buffer_len > 0) {
            const size_t n = std::min(buffer_len - 1, text.size());
            std::memcpy(buffer, text.data(), n);
            buffer[n] = '\0';
        }
    });
}

saefin_status saefin_run_stage(const char* stage, const char* config_json,
                               const char* run_dir, int force) {
    if (auto s = require(stage != nullptr, "stage must not be NULL"); s != SAEFIN_OK)
        return s;
    if (auto s = require(run_dir != nullptr, "run_dir must not be NULL"); s != SAEFIN_OK)
        return s;
    return guarded([&]() {
        const saefin::pipeline::ExperimentConfig config =
            saefin::pipeline::parse_config(config_json ? config_json : "");
        saefin::pipeline::run_stage(stage, config, run_dir, force != 0);
    });
}

saefin_status saefin_report(const char* run_dir, const char* out_path) {
    if (auto s = require(run_dir && out_path, "run_dir and out_path must not be NULL");
        s != SAEFIN_OK)
        return s;
    return guarded(
        [&]() { saefin::pipeline::write_report(run_dir, out_path); });
}

saefin_status saefin_model_load(const char* path, saefin_model** out) {
    if (auto s = require(path && out, "path and out must not be NULL"); s != SAEFIN_OK)
        return s;
    *out = nullptr;
    return guarded([&]() {
        auto handle = new saefin_model{saefin::lm::load_checkpoint(path)};
        *out = handle;
    });
}

void saefin_model_free(saefin_model* model) { delete model; }

saefin_status saefin_model_info(const saefin_model* model, uint32_t* vocab_size,
                                uint32_t* hidden_dim, uint32_t* num_layers) {
    if (auto s = require(model != nullptr, "model must not be NULL"); s != SAEFIN_OK)
        return s;
    if (vocab_size) *vocab_size = model->model.config.vocab_size;
    if (hidden_dim) *hidden_dim = static_cast<uint32_t>(model->model.config.hidden_dim);
    if (num_layers) *num_layers = static_cast<uint32_t>(model->model.config.num_layers);
    return SAEFIN_OK;
}

saefin_status saefin_model_forward(const saefin_model* model, const uint32_t* tokens,
                                   size_t num_tokens, double* probs) {
    if (auto s = require(model && tokens && probs, "NULL argument"); s != SAEFIN_OK)
        return s;
    return guarded([&]() {
        const saefin::lm::TokenSeq seq(tokens, tokens + num_tokens);
        const auto trace = saefin::lm::forward(model->model, seq);
        std::memcpy(probs, trace.final_distribution.data(),
                    trace.final_distribution.size() * sizeof(double));
    });
}

saefin_status saefin_sae_load(const char* path, saefin_sae** out) {
    if (auto s = require(path && out, "path and out must not be NULL"); s != SAEFIN_OK)
        return s;
    *out = nullptr;
    return guarded([&]() {
        auto handle = new saefin_sae{saefin::sae::load_checkpoint(path)};
        *out = handle;
    });
}

void saefin_sae_free(saefin_sae* sae) { delete sae; }

saefin_status saefin_sae_info(const saefin_sae* sae, uint32_t* input_dim,
                              uint32_t* latent_dim) {
    if (auto s = require(sae != nullptr, "sae must not be NULL"); s != SAEFIN_OK)
        return s;
    if (input_dim) *input_dim = static_cast<uint32_t>(sae->sae.config.input_dim);
    if (latent_dim) *latent_dim = static_cast<uint32_t>(sae->sae.config.latent_dim);
    return SAEFIN_OK;
}

saefin_status saefin_sae_encode(const saefin_sae* sae, const double* x, size_t x_len,
                                double* code, size_t code_len) {
    if (auto s = require(sae && x && code, "NULL argument"); s != SAEFIN_OK) return s;
    return guarded([&]() {
        if (code_len < sae->sae.config.latent_dim)
            throw std::invalid_argument("code buffer too small");
        const std::vector<double> input(x, x + x_len);
        const auto z = saefin::sae::encode(sae->sae, input);
        std::memcpy(code, z.data(), z.size() * sizeof(double));
    });
}

saefin_status saefin_sae_decode(const saefin_sae* sae, const double* code,
                                size_t code_len, double* recon, size_t recon_len) {
    if (auto s = require(sae && code && recon, "NULL argument"); s != SAEFIN_OK) return s;
    return guarded([&]() {
        if (recon_len < sae->sae.config.input_dim)
            throw std::invalid_argument("reconstruction buffer too small");
        const std::vector<double> z(code, code + code_len);
        const auto x = saefin::sae::decode(sae->sae, z);
        std::memcpy(recon, x.data(), x.size() * sizeof(double));
    });
}

saefin_status saefin_steering_delta(const saefin_sae* sae, size_t feature,
                                    double strength, double* delta, size_t delta_len) {
    if (auto s = require(sae && delta, "NULL argument"); s != SAEFIN_OK) return s;
    return guarded([&]() {
        if (delta_len < sae->sae.config.input_dim)
            throw std::invalid_argument("delta buffer too small");
        const auto d = saefin::steering::steering_delta(sae->sae,
                                                        {feature, strength, {0}});
        std::memcpy(delta, d.data(), d.size() * sizeof(double));
    });
}

saefin_status saefin_steered_forward(const saefin_model* model, const saefin_sae* sae,
                                     const uint32_t* tokens, size_t num_tokens,
                                     size_t feature, double strength, size_t tap,
                                     double* baseline, double* steered) {
    if (auto s = require(model && sae && tokens && baseline && steered, "NULL argument");
        s != SAEFIN_OK)
        return s;
    return guarded([&]() {
        const saefin::lm::TokenSeq seq(tokens, tokens + num_tokens);
        const auto out = saefin::steering::steered_forward(model->model, sae->sae, seq,
                                                           {feature, strength, {tap}});
        std::memcpy(baseline, out.baseline.data(), out.baseline.size() * sizeof(double));
        std::memcpy(steered, out.steered.data(), out.steered.size() * sizeof(double));
    });
}

}  // extern "C"
