#ifndef PURLS_H
#define PURLS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum PurlsStatus {
  PURLS_STATUS_OK = 0,
  PURLS_STATUS_NULL_ARGUMENT = 1,
  PURLS_STATUS_INVALID_UTF8 = 2,
  PURLS_STATUS_IO = 3,
  PURLS_STATUS_INVALID_BUNDLE = 4,
  PURLS_STATUS_INVALID_CONFIG = 5,
  PURLS_STATUS_MISMATCH = 6,
  PURLS_STATUS_NOT_FOUND = 7,
  PURLS_STATUS_PANIC = 99,
} PurlsStatus;

/**
 * A validated bundle.
 */
typedef struct PurlsBundle PurlsBundle;

/**
 * A trained model with its training metadata.
 */
typedef struct PurlsModel PurlsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads and validates the bundle directory `dir`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum PurlsStatus purls_bundle_load(const char *dir, struct PurlsBundle **out);

/**
 * # Safety
 * `bundle` must come from [`purls_bundle_load`] or be null.
 */
void purls_bundle_free(struct PurlsBundle *bundle);

/**
 * Number of classes and samples in a bundle.
 *
 * # Safety
 * Pointers must be valid.
 */
enum PurlsStatus purls_bundle_counts(const struct PurlsBundle *bundle,
                                     uint32_t *classes,
                                     uint32_t *samples);

/**
 * Trains on the seen classes of the split file. `config_json` holds
 * `TrainConfig` fields and may be null for the defaults.
 *
 * # Safety
 * Strings must be NUL-terminated; `out` must be writable.
 */
enum PurlsStatus purls_train(const struct PurlsBundle *bundle,
                             const char *split_path,
                             const char *config_json,
                             struct PurlsModel **out);

/**
 * Loads a checkpoint directory.
 *
 * # Safety
 * `dir` must be NUL-terminated; `out` must be writable.
 */
enum PurlsStatus purls_model_load(const char *dir, struct PurlsModel **out);

/**
 * Writes a checkpoint directory.
 *
 * # Safety
 * `model` must be valid; `dir` NUL-terminated.
 */
enum PurlsStatus purls_model_save(const struct PurlsModel *model, const char *dir);

/**
 * # Safety
 * `model` must come from this library or be null.
 */
void purls_model_free(struct PurlsModel *model);

/**
 * Zero-shot top-1 accuracy on the unseen classes of the split file.
 *
 * # Safety
 * Pointers must be valid.
 */
enum PurlsStatus purls_evaluate_top1(const struct PurlsBundle *bundle,
                                     const char *split_path,
                                     const struct PurlsModel *model,
                                     double *top1);

/**
 * Predicts the class of one bundle sample among `n_candidates` class ids.
 *
 * # Safety
 * `candidates` must point at `n_candidates` readable ids.
 */
enum PurlsStatus purls_predict(const struct PurlsBundle *bundle,
                               const struct PurlsModel *model,
                               const char *sample_id,
                               const uint32_t *candidates,
                               size_t n_candidates,
                               uint32_t *out_class);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `len > 0`). Returns the full message length
 * in bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must point at `len` writable bytes, or be null with `len == 0`.
 */
size_t purls_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *purls_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PURLS_H */
