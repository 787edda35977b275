#ifndef NOVELTY_H
#define NOVELTY_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum NvStatus {
  NV_STATUS_OK = 0,
  NV_STATUS_NULL_POINTER = 1,
  NV_STATUS_INVALID_UTF8 = 2,
  NV_STATUS_SHAPE = 3,
  NV_STATUS_NUMERIC = 4,
  NV_STATUS_CONTRACT = 5,
  NV_STATUS_USAGE = 6,
  NV_STATUS_CONFIG = 7,
  NV_STATUS_PARSE = 8,
  NV_STATUS_VERSION = 9,
  NV_STATUS_IO = 10,
  NV_STATUS_PANIC = 11,
} NvStatus;

/**
 * Opaque detector handle.
 */
typedef struct NvDetector NvDetector;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *nv_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *nv_last_error(void);

/**
 * Build an untrained detector from a JSON detector spec (`"{}"` selects the
 * defaults) with seeded initialization.
 *
 * # Safety
 * `spec_json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum NvStatus nv_detector_build(const char *spec_json, uint64_t seed, struct NvDetector **out);

/**
 * Load a checkpoint written by the `train` command or [`nv_detector_save`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum NvStatus nv_detector_load(const char *path, struct NvDetector **out);

/**
 * # Safety
 * `h` must come from this library; `path` must be a NUL-terminated string.
 */
enum NvStatus nv_detector_save(const struct NvDetector *h, const char *path);

/**
 * Release a handle; null is ignored.
 *
 * # Safety
 * `h` must come from this library and must not be used afterwards.
 */
void nv_detector_free(struct NvDetector *h);

/**
 * Input geometry: channels and square side length.
 *
 * # Safety
 * `h` must come from this library; output pointers must be valid.
 */
enum NvStatus nv_detector_geometry(const struct NvDetector *h, size_t *channels, size_t *side);

/**
 * Fit the purifier components from a batch of known-class images; a no-op
 * for detectors without a purifier.
 *
 * # Safety
 * `h` must come from this library; `images` holds `n` items.
 */
enum NvStatus nv_detector_init_components(struct NvDetector *h, const float *images, size_t n);

/**
 * Per-item novelty scores (L2 reconstruction error) into `scores[n]`.
 *
 * # Safety
 * `h` must come from this library; `images` holds `n` items and `scores`
 * has room for `n` values.
 */
enum NvStatus nv_detector_scores(const struct NvDetector *h,
                                 const float *images,
                                 size_t n,
                                 double *scores);

/**
 * Craft adversarial versions of `images` with a JSON attack config (same
 * keys as the `[[attacks]]` table; `"{}"` is PGD at the default budget).
 * `labels[i]` is +1 for known-class items and -1 for novel ones.
 *
 * # Safety
 * `h` must come from this library; `images` and `out_images` hold `n`
 * items; `labels` holds `n` values.
 */
enum NvStatus nv_attack(const struct NvDetector *h,
                        const char *attack_json,
                        const float *images,
                        const double *labels,
                        size_t n,
                        float *out_images);

/**
 * AUROC with anomalous items as the positive class; ties count one half.
 *
 * # Safety
 * `normal` and `anomalous` hold `n_normal` and `n_anomalous` values.
 */
enum NvStatus nv_auroc(const double *normal,
                       size_t n_normal,
                       const double *anomalous,
                       size_t n_anomalous,
                       double *out);

/**
 * False-positive rate at the first threshold reaching `tpr`.
 *
 * # Safety
 * `normal` and `anomalous` hold `n_normal` and `n_anomalous` values.
 */
enum NvStatus nv_fpr_at_tpr(const double *normal,
                            size_t n_normal,
                            const double *anomalous,
                            size_t n_anomalous,
                            double tpr,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NOVELTY_H */
