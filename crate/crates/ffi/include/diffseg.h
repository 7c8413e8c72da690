#ifndef DIFFSEG_H
#define DIFFSEG_H

/* Generated by cbindgen from the diffseg-ffi sources. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum DsStatus {
  DS_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  DS_STATUS_NULL_POINTER = 1,
  /**
   * Invalid argument or configuration.
   */
  DS_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Unreadable or malformed input data.
   */
  DS_STATUS_DATA = 3,
  /**
   * Failure while running the model or reading a checkpoint.
   */
  DS_STATUS_RUNTIME = 4,
  /**
   * Internal error (a Rust panic was caught).
   */
  DS_STATUS_INTERNAL = 5,
} DsStatus;

/**
 * Trained model handle.
 */
typedef struct DsModel DsModel;

/**
 * Noise schedule handle.
 */
typedef struct DsSchedule DsSchedule;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null if none. The
 * string stays valid until the next failing call on the same thread.
 */
const char *ds_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ds_version(void);

/**
 * Linear schedule of `num_steps` betas from `beta_start` to `beta_end`.
 *
 * # Safety
 * `out` must be null or valid for writes.
 */
enum DsStatus ds_schedule_linear(size_t num_steps,
                                 double beta_start,
                                 double beta_end,
                                 struct DsSchedule **out_schedule);

/**
 * # Safety
 * `schedule` must be null or a handle from [`ds_schedule_linear`] not yet freed.
 */
void ds_schedule_free(struct DsSchedule *schedule);

/**
 * Number of diffusion steps.
 *
 * # Safety
 * Pointers must be null or valid.
 */
enum DsStatus ds_schedule_num_steps(const struct DsSchedule *schedule, size_t *out_steps);

/**
 * Cumulative signal fraction `alpha_bar(t)` for `t` in `0..=N`.
 *
 * # Safety
 * Pointers must be null or valid.
 */
enum DsStatus ds_schedule_alpha_bar(const struct DsSchedule *schedule, size_t t, double *out_value);

/**
 * Reverse-posterior coefficients at `t` in `1..=N`: the mean is
 * `c0 * x0 + ct * xt` and the variance is `var`.
 *
 * # Safety
 * Pointers must be null or valid.
 */
enum DsStatus ds_schedule_posterior(const struct DsSchedule *schedule,
                                    size_t t,
                                    double *out_c0,
                                    double *out_ct,
                                    double *out_var);

/**
 * Loads a trained model from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out_model` must be null or valid.
 */
enum DsStatus ds_model_load(const char *path, struct DsModel **out_model);

/**
 * # Safety
 * `model` must be null or a handle from [`ds_model_load`] not yet freed.
 */
void ds_model_free(struct DsModel *model);

/**
 * Side length of the square patches the model works on; image dimensions
 * passed to [`ds_model_segment`] must be multiples of it.
 *
 * # Safety
 * Pointers must be null or valid.
 */
enum DsStatus ds_model_patch_size(const struct DsModel *model, size_t *out_size);

/**
 * Segments an interleaved RGB image (`height * width * 3` floats in
 * `[0, 1]`, row-major) with the `steps`-step ODE sampler. Writes
 * `height * width` bytes (1 = foreground) to `out_mask` and, if
 * `out_continuous` is not null, the `[-1, 1]` continuous mask.
 *
 * # Safety
 * `rgb` must hold `height * width * 3` floats, `out_mask` `height * width`
 * bytes and `out_continuous` (if not null) `height * width` floats.
 */
enum DsStatus ds_model_segment(const struct DsModel *model,
                               const float *rgb,
                               size_t height,
                               size_t width,
                               size_t steps,
                               uint64_t seed,
                               double threshold,
                               uint8_t *out_mask,
                               float *out_continuous);

/**
 * IoU and F1 of a predicted mask against ground truth, both `len` bytes
 * of 0/1.
 *
 * # Safety
 * `pred` and `truth` must hold `len` bytes; outputs must be null or valid.
 */
enum DsStatus ds_mask_scores(const uint8_t *pred,
                             const uint8_t *truth,
                             size_t len,
                             double *out_iou,
                             double *out_f1);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIFFSEG_H */
