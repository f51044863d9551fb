#ifndef CROSSDRAFT_H
#define CROSSDRAFT_H

/* Generated by cbindgen from crates/ffi/src; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum CdStatus {
  CD_STATUS_OK = 0,
  CD_STATUS_NULL_POINTER = 1,
  CD_STATUS_INVALID_UTF8 = 2,
  CD_STATUS_DIMENSION = 3,
  CD_STATUS_PARAMETER = 4,
  CD_STATUS_CAPACITY = 5,
  CD_STATUS_ORDERING = 6,
  CD_STATUS_STATE = 7,
  CD_STATUS_CONSISTENCY = 8,
  CD_STATUS_FORMAT = 9,
  CD_STATUS_CONFIG = 10,
  CD_STATUS_IO = 11,
  CD_STATUS_BUFFER_TOO_SMALL = 12,
  CD_STATUS_PANIC = 13,
} CdStatus;

/*
 Opaque model handle.
 */
typedef struct CdModel CdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. The pointer is
 valid until the next crossdraft call on this thread.
 */
const char *cd_last_error_message(void);

/*
 Loads a weight file.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CdStatus cd_model_load(const char *path, struct CdModel **out);

/*
 Builds a model with seeded random weights.

 # Safety
 `out` must be a valid pointer.
 */
enum CdStatus cd_model_random(size_t vocab,
                              size_t n_layers,
                              size_t n_heads,
                              size_t d_head,
                              size_t d_ff,
                              size_t max_pos,
                              uint64_t seed,
                              struct CdModel **out);

/*
 Builds the hand-constructed copy (induction) model.

 # Safety
 `out` must be a valid pointer.
 */
enum CdStatus cd_model_copy(size_t max_pos, uint64_t seed, struct CdModel **out);

/*
 A draft made of the first `keep_layers` blocks of `target`.

 # Safety
 `target` must be a live handle and `out` a valid pointer.
 */
enum CdStatus cd_model_derive_draft(const struct CdModel *target,
                                    size_t keep_layers,
                                    struct CdModel **out);

/*
 Writes a weight file.

 # Safety
 `model` must be a live handle and `path` a NUL-terminated string.
 */
enum CdStatus cd_model_save(const struct CdModel *model, const char *path);

/*
 Vocabulary size, layer count and maximum position of a model.

 # Safety
 `model` must be a live handle; each output pointer may be null.
 */
enum CdStatus cd_model_info(const struct CdModel *model,
                            size_t *vocab,
                            size_t *n_layers,
                            size_t *max_pos);

/*
 Releases a model handle. Null is ignored.

 # Safety
 `model` must come from this library and not be used afterwards.
 */
void cd_model_free(struct CdModel *model);

/*
 Target-only greedy decoding of `n_tokens` tokens into `out_tokens`.

 # Safety
 `prompt` must hold `prompt_len` tokens and `out_tokens` room for
 `n_tokens`.
 */
enum CdStatus cd_greedy_generate(const struct CdModel *model,
                                 const size_t *prompt,
                                 size_t prompt_len,
                                 size_t n_tokens,
                                 size_t *out_tokens);

/*
 Speculative decoding of `prompt` with `target` verifying `draft`.
 `config_text` uses the experiment config format (policy, drafting,
 temperature, seed, gen_tokens, ...; model and task keys are ignored).
 Writes the first `gen_tokens` tokens and, when `tau` is non-null, the
 average accepted length.

 # Safety
 Handles must be live; `prompt` must hold `prompt_len` tokens and
 `out_tokens` room for `out_capacity` tokens.
 */
enum CdStatus cd_speculative_generate(const struct CdModel *target,
                                      const struct CdModel *draft,
                                      const size_t *prompt,
                                      size_t prompt_len,
                                      const char *config_text,
                                      size_t *out_tokens,
                                      size_t out_capacity,
                                      double *tau);

/*
 Runs a full experiment from config text and returns its report as JSON.
 Release the string with [`cd_string_free`].

 # Safety
 `config_text` must be NUL-terminated and `out_json` a valid pointer.
 */
enum CdStatus cd_run_experiment(const char *config_text, char **out_json);

/*
 Releases a string returned by this library. Null is ignored.

 # Safety
 `s` must come from this library and not be used afterwards.
 */
void cd_string_free(char *s);

/*
 Latency model: `ratio = (d * t_d / t_t + t_v / t_t) / tau`, `speedup =
 1 / ratio`.

 # Safety
 `ratio` and `speedup` must be valid pointers.
 */
enum CdStatus cd_speedup_model(double tau,
                               double d,
                               double t_d,
                               double t_t,
                               double t_v,
                               size_t n,
                               double *ratio,
                               double *speedup);

/*
 `1 - sum(min(p, q))` over two distributions of length `len`.

 # Safety
 `p` and `q` must hold `len` values and `out` be a valid pointer.
 */
enum CdStatus cd_natural_divergence(const double *p, const double *q, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CROSSDRAFT_H */
