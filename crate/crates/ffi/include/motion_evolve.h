#ifndef MOTION_EVOLVE_H
#define MOTION_EVOLVE_H

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum MeStatus {
  ME_STATUS_OK = 0,
  ME_STATUS_INVALID_ARGUMENT = 1,
  ME_STATUS_NUMERICAL_DIVERGENCE = 2,
  ME_STATUS_TRAINING_DIVERGED = 3,
  ME_STATUS_DEGENERATE_EMBEDDING = 4,
  ME_STATUS_IO = 5,
  ME_STATUS_FORMAT = 6,
  ME_STATUS_NULL_POINTER = 7,
  ME_STATUS_PANIC = 8,
} MeStatus;

/**
 * A loaded checkpoint. Opaque to C.
 */
typedef struct MeModel MeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *me_version(void);

/**
 * Message of the last failed call on this thread, or NULL.
 *
 * The pointer stays valid until the next library call on the same thread.
 */
const char *me_last_error_message(void);

/**
 * Loads a checkpoint file into a new model handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MeStatus me_model_load(const char *path, struct MeModel **out);

/**
 * Releases a handle from [`me_model_load`]. NULL is ignored.
 *
 * # Safety
 * `model` must come from [`me_model_load`] and not be freed twice.
 */
void me_model_free(struct MeModel *model);

/**
 * Frame size the model expects.
 *
 * # Safety
 * `model` must be a live handle; `height` and `width` must be writable.
 */
enum MeStatus me_model_frame_size(const struct MeModel *model, size_t *height, size_t *width);

/**
 * Synthesizes one frame: `source` plus `num_references` frames packed
 * back to back in `references`, driven by `driving`. Writes `3 * H * W`
 * doubles to `out`.
 *
 * # Safety
 * All frame pointers must hold the documented number of doubles at the
 * model's frame size; `references` may be NULL when `num_references` is 0.
 */
enum MeStatus me_model_synthesize(const struct MeModel *model,
                                  const double *source,
                                  const double *references,
                                  size_t num_references,
                                  const double *driving,
                                  double *out);

/**
 * Mean absolute difference of two frames.
 *
 * # Safety
 * `a` and `b` hold `3 * height * width` doubles; `out` is writable.
 */
enum MeStatus me_metric_l1(const double *a,
                           const double *b,
                           size_t height,
                           size_t width,
                           double *out);

/**
 * PSNR in dB with peak 1; identical frames give a finite sentinel.
 *
 * # Safety
 * As [`me_metric_l1`].
 */
enum MeStatus me_metric_psnr(const double *a,
                             const double *b,
                             size_t height,
                             size_t width,
                             double *out);

/**
 * Gaussian-window SSIM.
 *
 * # Safety
 * As [`me_metric_l1`].
 */
enum MeStatus me_metric_ssim(const double *a,
                             const double *b,
                             size_t height,
                             size_t width,
                             double *out);

/**
 * Multi-scale SSIM over `levels` scales.
 *
 * # Safety
 * As [`me_metric_l1`].
 */
enum MeStatus me_metric_ms_ssim(const double *a,
                                const double *b,
                                size_t height,
                                size_t width,
                                size_t levels,
                                double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOTION_EVOLVE_H */
