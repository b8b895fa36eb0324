#ifndef INTERMPL_H
#define INTERMPL_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every exported function.
 */
typedef enum ImplStatus {
  IMPL_STATUS_OK = 0,
  IMPL_STATUS_NULL_POINTER = 1,
  IMPL_STATUS_INVALID_ARGUMENT = 2,
  IMPL_STATUS_IO = 3,
  IMPL_STATUS_CONFIG = 4,
  IMPL_STATUS_NUMERIC = 5,
  IMPL_STATUS_INFEASIBLE = 6,
  IMPL_STATUS_BUFFER_TOO_SMALL = 7,
  IMPL_STATUS_PANIC = 8,
} ImplStatus;

/**
 * A loaded checkpoint.
 */
typedef struct ImplModel ImplModel;

/**
 * A loaded vocabulary hierarchy.
 */
typedef struct ImplVocab ImplVocab;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread. Empty after a
 * successful call. The pointer stays valid until the next call on the same
 * thread.
 */
const char *impl_last_error(void);

/**
 * Load a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ImplStatus impl_model_load(const char *path, struct ImplModel **out);

/**
 * # Safety
 * `model` must come from [`impl_model_load`] and not be used afterwards.
 */
void impl_model_free(struct ImplModel *model);

/**
 * Input feature dimension of the model.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum ImplStatus impl_model_feature_dim(const struct ImplModel *model, size_t *out);

/**
 * Number of CTC heads of the model.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum ImplStatus impl_model_num_heads(const struct ImplModel *model, size_t *out);

/**
 * Load a vocabulary file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ImplStatus impl_vocab_load(const char *path, struct ImplVocab **out);

/**
 * # Safety
 * `vocab` must come from [`impl_vocab_load`] and not be used afterwards.
 */
void impl_vocab_free(struct ImplVocab *vocab);

/**
 * Decode 1-based token ids at `level` into text.
 *
 * # Safety
 * `ids` must point to `len` values; `buf` to `cap` writable bytes.
 */
enum ImplStatus impl_vocab_decode(const struct ImplVocab *vocab,
                                  size_t level,
                                  const size_t *ids,
                                  size_t len,
                                  char *buf,
                                  size_t cap,
                                  size_t *required);

/**
 * Best-path transcript of a `frames x dim` row-major feature matrix.
 *
 * # Safety
 * Handles must be live; `features` must point to `frames * dim` values and
 * `buf` to `cap` writable bytes.
 */
enum ImplStatus impl_transcribe(const struct ImplModel *model,
                                const struct ImplVocab *vocab,
                                const double *features,
                                size_t frames,
                                size_t dim,
                                char *buf,
                                size_t cap,
                                size_t *required);

/**
 * CTC loss of `target` under a `frames x width` log-probability matrix whose
 * column 0 is the blank.
 *
 * # Safety
 * `log_probs` must point to `frames * width` values, `target` to
 * `target_len` values, `out` must be valid.
 */
enum ImplStatus impl_ctc_loss(const double *log_probs,
                              size_t frames,
                              size_t width,
                              const size_t *target,
                              size_t target_len,
                              double *out);

/**
 * Greedy best-path decode. `out_len` receives the label count, even when
 * `cap` is too small.
 *
 * # Safety
 * `log_probs` must point to `frames * width` values, `labels` to `cap`
 * writable values.
 */
enum ImplStatus impl_best_path(const double *log_probs,
                               size_t frames,
                               size_t width,
                               size_t *labels,
                               size_t cap,
                               size_t *out_len);

/**
 * Word error rate of whitespace-separated `hypothesis` against `reference`.
 *
 * # Safety
 * Both strings must be NUL-terminated; `out` must be valid.
 */
enum ImplStatus impl_wer(const char *hypothesis, const char *reference, double *out);

/**
 * WER recovery rate in percent.
 *
 * # Safety
 * `out` must be valid.
 */
enum ImplStatus impl_wrr(double seed_wer, double model_wer, double oracle_wer, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INTERMPL_H */
