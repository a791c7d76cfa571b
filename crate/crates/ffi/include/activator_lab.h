#ifndef ACTIVATOR_LAB_H
#define ACTIVATOR_LAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes of every fallible call.
 */
typedef enum ActvStatus {
  ACTV_STATUS_OK = 0,
  ACTV_STATUS_NULL_POINTER = 1,
  ACTV_STATUS_INVALID_ARGUMENT = 2,
  ACTV_STATUS_IO = 3,
  ACTV_STATUS_CORRUPT_CHECKPOINT = 4,
  ACTV_STATUS_SHAPE = 5,
  ACTV_STATUS_VERIFICATION_FAILED = 6,
  ACTV_STATUS_PANIC = 7,
} ActvStatus;

/**
 * Opaque model handle (32-bit parameters).
 */
typedef struct ActvModel ActvModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into the library on the same thread.
 */
const char *actv_last_error(void);

/**
 * Build a freshly initialised model.
 *
 * `arch`: `vit`, `mixer`, `synthesizer`, `activator` or
 * `activator_geglu_only`. `preset`: `paper` or `mini`.
 *
 * # Safety
 * `arch` and `preset` must be NUL-terminated strings; `out` must be writable.
 */
enum ActvStatus actv_model_new(const char *arch,
                               const char *preset,
                               uint32_t n_classes,
                               uint64_t seed,
                               struct ActvModel **out);

/**
 * Load a checkpoint written by `actv_model_save` or the `train` command.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum ActvStatus actv_model_load(const char *path, struct ActvModel **out);

/**
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
enum ActvStatus actv_model_save(const struct ActvModel *model, const char *path);

/**
 * Release a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void actv_model_free(struct ActvModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum ActvStatus actv_model_param_count(const struct ActvModel *model, uint64_t *out);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum ActvStatus actv_model_num_classes(const struct ActvModel *model, uint32_t *out);

/**
 * Architecture tag: 0 vit, 1 mixer,
 * 2 synthesizer, 3 activator, 4 activator_geglu_only.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum ActvStatus actv_model_arch(const struct ActvModel *model, uint32_t *out);

/**
 * Logits for `n_images` already-normalised images laid out
 * `[n_images, 3, 32, 32]`. `logits` must hold `n_images × num_classes`
 * floats; `logits_len` is its capacity.
 *
 * # Safety
 * `images` must point to `n_images·3072` floats and `logits` to
 * `logits_len` writable floats.
 */
enum ActvStatus actv_model_logits(const struct ActvModel *model,
                                  const float *images,
                                  size_t n_images,
                                  float *logits,
                                  size_t logits_len);

/**
 * Finite-difference gradient check of `arch` at miniature scale (64-bit).
 * Writes the largest relative error to `max_rel_error` (may be null) and
 * returns `ACTV_STATUS_VERIFICATION_FAILED` if it is not below 1e-4.
 *
 * # Safety
 * `arch` must be a NUL-terminated string; `max_rel_error` null or writable.
 */
enum ActvStatus actv_gradcheck(const char *arch, double *max_rel_error);

/**
 * Library version, static NUL-terminated string.
 */
const char *actv_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ACTIVATOR_LAB_H */
