#ifndef AQLEARN_H
#define AQLEARN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum AqStatus {
  AQ_STATUS_OK = 0,
  AQ_STATUS_NULL_ARGUMENT = 1,
  AQ_STATUS_INVALID_ARGUMENT = 2,
  AQ_STATUS_IO = 3,
  AQ_STATUS_NUMERIC = 4,
  AQ_STATUS_CHECKPOINT = 5,
  AQ_STATUS_FORMAT = 6,
  AQ_STATUS_EXTERNAL_TOOL = 7,
  AQ_STATUS_PANIC = 8,
} AqStatus;

/**
 * A fitted distance-to-score mapping.
 */
typedef struct AqMapping AqMapping;

/**
 * A trained (or frozen) encoder.
 */
typedef struct AqModel AqModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on this thread.
 */
const char *aq_last_error(void);

/**
 * Library version as a static string.
 */
const char *aq_version(void);

/**
 * Loads a checkpoint trained on the toy backbone with `backbone_seed`.
 *
 * # Safety
 * `checkpoint` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AqStatus aq_model_load_toy(uint64_t backbone_seed,
                                const char *checkpoint,
                                struct AqModel **out);

/**
 * Loads a checkpoint trained on the published backbone stored in `backbone_dir`.
 *
 * # Safety
 * String arguments must be NUL-terminated and `out` a valid pointer.
 */
enum AqStatus aq_model_load_pretrained(const char *backbone_dir,
                                       const char *revision,
                                       uint32_t default_sample_rate,
                                       const char *checkpoint,
                                       struct AqModel **out);

/**
 * # Safety
 * `model` must come from an `aq_model_load_*` call and not be used afterwards.
 */
void aq_model_free(struct AqModel *model);

/**
 * Embedding dimension, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t aq_model_embedding_dim(const struct AqModel *model);

/**
 * Sample rate the model runs at, or 0 for a null handle. Inputs at other
 * rates are resampled.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint32_t aq_model_sample_rate(const struct AqModel *model);

/**
 * Embeds a mono signal into `out[0..out_len]`; `out_len` must equal
 * `aq_model_embedding_dim`.
 *
 * # Safety
 * `samples` must hold `n` floats and `out` room for `out_len` doubles.
 */
enum AqStatus aq_model_embed(const struct AqModel *model,
                             const float *samples,
                             size_t n,
                             uint32_t sample_rate,
                             double *out,
                             size_t out_len);

/**
 * Full-reference embedding distance between two mono signals at one rate.
 *
 * # Safety
 * `test` and `reference` must hold `n_test` and `n_reference` floats;
 * `out` must be a valid pointer.
 */
enum AqStatus aq_model_fr_distance(const struct AqModel *model,
                                   const float *test,
                                   size_t n_test,
                                   const float *reference,
                                   size_t n_reference,
                                   uint32_t sample_rate,
                                   double *out);

/**
 * # Safety
 * `path` must be NUL-terminated and `out` a valid pointer.
 */
enum AqStatus aq_mapping_load(const char *path, struct AqMapping **out);

/**
 * Maps a distance to a score on the mapping's scale.
 *
 * # Safety
 * `mapping` must be a live handle and `out` a valid pointer.
 */
enum AqStatus aq_mapping_apply(const struct AqMapping *mapping, double distance, double *out);

/**
 * # Safety
 * `mapping` must come from `aq_mapping_load` and not be used afterwards.
 */
void aq_mapping_free(struct AqMapping *mapping);

/**
 * Fréchet distance between two embedding sets stored row-major as
 * `n_a x dim` and `n_b x dim`.
 *
 * # Safety
 * `a` and `b` must hold `n_a * dim` and `n_b * dim` doubles.
 */
enum AqStatus aq_fad(const double *a,
                     size_t n_a,
                     const double *b,
                     size_t n_b,
                     size_t dim,
                     double *out);

/**
 * Pearson correlation; `AQ_STATUS_INVALID_ARGUMENT` when undefined.
 *
 * # Safety
 * `x` and `y` must hold `n` doubles; `out` must be a valid pointer.
 */
enum AqStatus aq_pearson(const double *x, const double *y, size_t n, double *out);

/**
 * Spearman rank correlation with average ranks for ties.
 *
 * # Safety
 * As [`aq_pearson`].
 */
enum AqStatus aq_spearman(const double *x, const double *y, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AQLEARN_H */
