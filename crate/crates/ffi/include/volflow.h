#ifndef VOLFLOW_H
#define VOLFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VfStatus {
  VF_STATUS_OK = 0,
  VF_STATUS_NULL_POINTER = 1,
  VF_STATUS_INVALID_UTF8 = 2,
  VF_STATUS_IO = 3,
  VF_STATUS_JSON = 4,
  VF_STATUS_SHAPE = 5,
  VF_STATUS_FORMAT = 6,
  VF_STATUS_LENGTH = 7,
  VF_STATUS_ORDERING = 8,
  VF_STATUS_CONFIG = 9,
  VF_STATUS_EMPTY = 10,
  VF_STATUS_DIVERGED = 11,
  VF_STATUS_STATE = 12,
  VF_STATUS_BUFFER_TOO_SMALL = 13,
  VF_STATUS_PANIC = 14,
} VfStatus;

typedef enum VfVariant {
  VF_VARIANT_DISCRETE = 0,
  VF_VARIANT_CONTINUOUS = 1,
} VfVariant;

/**
 * Trained forecaster loaded from a checkpoint file.
 */
typedef struct VfModel VfModel;

/**
 * Context volumes with timestamps plus a target volume and time.
 */
typedef struct VfSequence VfSequence;

typedef struct VfMetrics {
  double nrmse;
  double ssim;
  double psnr;
} VfMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message (NUL-terminated, truncated to fit) into
 * `buf` and returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t vf_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *vf_version(void);

/**
 * Loads a checkpoint written by `volflow train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum VfStatus vf_model_load(const char *path, struct VfModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`vf_model_load`] not yet freed.
 */
void vf_model_free(struct VfModel *model);

/**
 * Number of input frames and the variant of a model.
 *
 * # Safety
 * `model` must be a live handle; outputs may be null.
 */
enum VfStatus vf_model_info(const struct VfModel *model, size_t *frames, enum VfVariant *variant);

/**
 * Reads a series directory (manifest.json + volumes.f32).
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum VfStatus vf_sequence_load(const char *dir, struct VfSequence **out);

/**
 * Builds a sequence from `n_contexts` volumes of `shape[0]*shape[1]*shape[2]`
 * voxels stored back to back in `contexts`, their `times`, and a target
 * volume (may be null for an all-zero placeholder).
 *
 * # Safety
 * All non-null pointers must reference buffers of the implied sizes.
 */
enum VfStatus vf_sequence_new(const size_t *shape,
                              size_t n_contexts,
                              const float *contexts,
                              const double *times,
                              const float *target,
                              double target_time,
                              struct VfSequence **out);

/**
 * # Safety
 * `seq` must be null or a handle not yet freed.
 */
void vf_sequence_free(struct VfSequence *seq);

/**
 * Context count, voxels per volume and target time of a sequence.
 *
 * # Safety
 * `seq` must be a live handle; outputs may be null.
 */
enum VfStatus vf_sequence_info(const struct VfSequence *seq,
                               size_t *n_contexts,
                               size_t *voxels,
                               double *target_time);

/**
 * Forecast at `target_time` with `nfe` Euler steps into `out` (`out_len`
 * floats). `mask` holds one byte per context (non-zero = observed) or is null.
 *
 * # Safety
 * Handles must be live; buffers must have the stated lengths.
 */
enum VfStatus vf_forecast(const struct VfModel *model,
                          const struct VfSequence *seq,
                          const uint8_t *mask,
                          size_t mask_len,
                          double target_time,
                          size_t nfe,
                          float *out,
                          size_t out_len);

/**
 * Last observed context volume into `out`.
 *
 * # Safety
 * As for [`vf_forecast`].
 */
enum VfStatus vf_lci(const struct VfSequence *seq,
                     const uint8_t *mask,
                     size_t mask_len,
                     float *out,
                     size_t out_len);

/**
 * NRMSE, SSIM and PSNR of `pred` against `gt`, both of the given shape.
 *
 * # Safety
 * `pred` and `gt` must hold `shape[0]*shape[1]*shape[2]` floats.
 */
enum VfStatus vf_metrics(const float *pred,
                         const float *gt,
                         const size_t *shape,
                         struct VfMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VOLFLOW_H */
