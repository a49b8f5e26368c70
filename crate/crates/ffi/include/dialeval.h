#ifndef DIALEVAL_H
#define DIALEVAL_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Number of features a hybrid model expects, in the library's canonical order.
 */
#define DIALEVAL_FEATURE_COUNT 11

/**
 * `dialeval_word_coherence` kinds.
 */
#define DIALEVAL_COHERENCE_AVG 0

#define DIALEVAL_COHERENCE_EXT 1

#define DIALEVAL_COHERENCE_GRD 2

typedef enum DialevalStatus {
  DIALEVAL_STATUS_OK = 0,
  DIALEVAL_STATUS_NULL_POINTER = 1,
  DIALEVAL_STATUS_INVALID_UTF8 = 2,
  DIALEVAL_STATUS_INVALID_ARGUMENT = 3,
  DIALEVAL_STATUS_IO = 4,
  DIALEVAL_STATUS_FORMAT = 5,
  /**
   * The quantity is undefined for this input (zero vectors, no known tokens, zero variance).
   */
  DIALEVAL_STATUS_UNDEFINED = 6,
  DIALEVAL_STATUS_PANIC = 7,
} DialevalStatus;

/**
 * A fitted hybrid quality model.
 */
typedef struct DialevalHybridModel DialevalHybridModel;

/**
 * Loaded word vectors.
 */
typedef struct DialevalWordVectors DialevalWordVectors;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * The calling thread's last error message, or NULL. Valid until the next call on this thread.
 */
const char *dialeval_last_error(void);

/**
 * Library version as a static string.
 */
const char *dialeval_version(void);

/**
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void dialeval_string_free(char *s);

/**
 * Loads a whitespace-separated word vector file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DialevalStatus dialeval_word_vectors_load(const char *path, struct DialevalWordVectors **out);

/**
 * # Safety
 * `h` must come from `dialeval_word_vectors_load` and not have been freed.
 */
void dialeval_word_vectors_free(struct DialevalWordVectors *h);

/**
 * Vector dimension of a loaded table.
 *
 * # Safety
 * `h` must be a live handle and `out` a valid pointer.
 */
enum DialevalStatus dialeval_word_vectors_dim(const struct DialevalWordVectors *h, size_t *out);

/**
 * Embedding coherence between a query and a response. `kind` is one of the `DIALEVAL_COHERENCE_*` values.
 *
 * # Safety
 * `h` must be a live handle, the strings NUL-terminated and `out` a valid pointer.
 */
enum DialevalStatus dialeval_word_coherence(const struct DialevalWordVectors *h,
                                            uint32_t kind,
                                            const char *query,
                                            const char *response,
                                            double *out);

/**
 * Loads a model written by `dialeval hybrid fit`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DialevalStatus dialeval_hybrid_model_load(const char *path, struct DialevalHybridModel **out);

/**
 * # Safety
 * `h` must come from `dialeval_hybrid_model_load` and not have been freed.
 */
void dialeval_hybrid_model_free(struct DialevalHybridModel *h);

/**
 * Predicted quality for one conversation. `features` holds `DIALEVAL_FEATURE_COUNT` values;
 * NaN marks a missing value, which is imputed.
 *
 * # Safety
 * `h` must be a live handle, `features` must point to `len` doubles and `out` must be valid.
 */
enum DialevalStatus dialeval_hybrid_model_predict(const struct DialevalHybridModel *h,
                                                  const double *features,
                                                  size_t len,
                                                  double *out);

/**
 * The bot held out when the model was fit, as a newly allocated string.
 *
 * # Safety
 * `h` must be a live handle and `out` a valid pointer.
 */
enum DialevalStatus dialeval_hybrid_model_held_out(const struct DialevalHybridModel *h, char **out);

/**
 * Pearson r with a permutation p-value. `p_out` may be NULL to skip the permutation test.
 *
 * # Safety
 * `x` and `y` must point to `n` doubles; `r_out` must be valid.
 */
enum DialevalStatus dialeval_pearson(const double *x,
                                     const double *y,
                                     size_t n,
                                     double *r_out,
                                     double *p_out);

/**
 * Spearman rank correlation with average ranks for ties.
 *
 * # Safety
 * `x` and `y` must point to `n` doubles; `out` must be valid.
 */
enum DialevalStatus dialeval_spearman(const double *x, const double *y, size_t n, double *out);

/**
 * Kendall tau-b.
 *
 * # Safety
 * `x` and `y` must point to `n` doubles; `out` must be valid.
 */
enum DialevalStatus dialeval_kendall(const double *x, const double *y, size_t n, double *out);

/**
 * Cohen's kappa between two raters' integer labels.
 *
 * # Safety
 * `a` and `b` must point to `n` integers; `out` must be valid.
 */
enum DialevalStatus dialeval_cohen_kappa(const int64_t *a, const int64_t *b, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIALEVAL_H */
