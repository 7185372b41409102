/* saefin - sparse-feature interpretability and steering toolkit for a toy
 * language model with a synthetic market evaluation pipeline.
 *
 * C interface of the shared library. All functions return a saefin_status;
 * on failure saefin_last_error() describes the problem (thread-local).
 * Handles are opaque and must be released with the matching _free call.
 */
#ifndef SAEFIN_H
#define SAEFIN_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum saefin_status {
    SAEFIN_OK = 0,
    SAEFIN_ERR_INVALID_ARGUMENT = 1,
    SAEFIN_ERR_CONFIG = 2,
    SAEFIN_ERR_RUNTIME = 3,
    SAEFIN_ERR_IO = 4
} saefin_status;

/* Library semantic version, e.g. "0.1.0". */
const char* saefin_version(void);

/* Message for the most recent failure on this thread; never NULL. */
const char* saefin_last_error(void);

/* Default experiment configuration as pretty-printed JSON. Writes up to
 * buffer_len bytes (NUL terminated); *needed receives the full length
 * including the terminator. Call with buffer = NULL to query the size. */
saefin_status saefin_default_config(char* buffer, size_t buffer_len, size_t* needed);

/* Run one pipeline stage (or "pipeline" for all of them) against run_dir.
 * Stages: simulate, train-lm, train-sae, label, rank-features, backtest,
 * steer, cluster, shapley, pipeline.
 * config_json may be NULL or empty for the defaults. force != 0 permits
 * overwriting existing stage outputs. */
saefin_status saefin_run_stage(const char* stage, const char* config_json,
                               const char* run_dir, int force);

/* Write the consolidated markdown report for a run directory. */
saefin_status saefin_report(const char* run_dir, const char* out_path);

/* ------------------------------------------------------------------------
 * Object-level API
 * ------------------------------------------------------------------------ */

typedef struct saefin_model saefin_model;
typedef struct saefin_sae saefin_sae;

saefin_status saefin_model_load(const char* path, saefin_model** out);
void saefin_model_free(saefin_model* model);
saefin_status saefin_model_info(const saefin_model* model, uint32_t* vocab_size,
                                uint32_t* hidden_dim, uint32_t* num_layers);

/* Next-token distribution for a token sequence; probs must hold vocab_size
 * doubles. */
saefin_status saefin_model_forward(const saefin_model* model, const uint32_t* tokens,
                                   size_t num_tokens, double* probs);

saefin_status saefin_sae_load(const char* path, saefin_sae** out);
void saefin_sae_free(saefin_sae* sae);
saefin_status saefin_sae_info(const saefin_sae* sae, uint32_t* input_dim,
                              uint32_t* latent_dim);

/* code must hold latent_dim doubles; recon must hold input_dim doubles. */
saefin_status saefin_sae_encode(const saefin_sae* sae, const double* x, size_t x_len,
                                double* code, size_t code_len);
saefin_status saefin_sae_decode(const saefin_sae* sae, const double* code,
                                size_t code_len, double* recon, size_t recon_len);

/* The residual-stream perturbation for steering one feature: strength times
 * the feature's decoder column. delta must hold input_dim doubles. */
saefin_status saefin_steering_delta(const saefin_sae* sae, size_t feature,
                                    double strength, double* delta, size_t delta_len);

/* Baseline and steered next-token distributions for a prompt, with the delta
 * injected into the residual stream at `tap` for every position onward.
 * baseline and steered must each hold vocab_size doubles. */
saefin_status saefin_steered_forward(const saefin_model* model, const saefin_sae* sae,
                                     const uint32_t* tokens, size_t num_tokens,
                                     size_t feature, double strength, size_t tap,
                                     double* baseline, double* steered);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* SAEFIN_H */
