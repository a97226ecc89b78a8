/* SPDX-License-Identifier: Apache-2.0 */

#ifndef SFSEG_H
#define SFSEG_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SfsegStatus {
  SFSEG_STATUS_OK = 0,
  SFSEG_STATUS_NULL_POINTER = 1,
  SFSEG_STATUS_INVALID_ARGUMENT = 2,
  SFSEG_STATUS_SHAPE = 3,
  SFSEG_STATUS_IO = 4,
  SFSEG_STATUS_CHECKPOINT = 5,
  SFSEG_STATUS_ARCHITECTURE = 6,
  SFSEG_STATUS_NON_FINITE = 7,
  SFSEG_STATUS_PANIC = 8,
} SfsegStatus;

/**
 * Opaque handle to a loaded segmentation network.
 */
typedef struct SfsegModel SfsegModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t sfseg_last_error(char *buf, size_t len);

/**
 * Loads a checkpoint archive.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `model` must be writable.
 */
enum SfsegStatus sfseg_model_load(const char *path, struct SfsegModel **model);

/**
 * Releases a handle from [`sfseg_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must be null or a live handle, freed at most once.
 */
void sfseg_model_free(struct SfsegModel *model);

/**
 * Runs the network on one RGB image and writes the foreground probability
 * and the normalized entropy (both `h × w`). Either output may be null.
 *
 * # Safety
 * `image` must hold `h·w·3` doubles; non-null outputs `h·w` doubles.
 */
enum SfsegStatus sfseg_model_predict(const struct SfsegModel *model,
                                     const double *image,
                                     size_t h,
                                     size_t w,
                                     double *foreground,
                                     double *entropy);

/**
 * Dice and IoU of `pred ≥ threshold` against the mask.
 *
 * # Safety
 * `pred` holds `h·w` doubles, `gt` `h·w` bytes; outputs are writable.
 */
enum SfsegStatus sfseg_dice_iou(const double *pred,
                                const uint8_t *gt,
                                size_t h,
                                size_t w,
                                double threshold,
                                double *dice,
                                double *iou);

/**
 * Mean absolute error.
 *
 * # Safety
 * As for [`sfseg_dice_iou`].
 */
enum SfsegStatus sfseg_mae(const double *pred,
                           const uint8_t *gt,
                           size_t h,
                           size_t w,
                           double *value);

/**
 * Weighted F-measure. `*defined` is set to 0 when the mask has no
 * foreground, in which case `*value` is NaN.
 *
 * # Safety
 * As for [`sfseg_dice_iou`].
 */
enum SfsegStatus sfseg_weighted_f(const double *pred,
                                  const uint8_t *gt,
                                  size_t h,
                                  size_t w,
                                  double *value,
                                  uint8_t *defined);

/**
 * Structure measure with object/region balance `alpha`.
 *
 * # Safety
 * As for [`sfseg_dice_iou`].
 */
enum SfsegStatus sfseg_s_measure(const double *pred,
                                 const uint8_t *gt,
                                 size_t h,
                                 size_t w,
                                 double alpha,
                                 double *value);

/**
 * Maximum enhanced-alignment measure over 256 thresholds.
 *
 * # Safety
 * As for [`sfseg_dice_iou`].
 */
enum SfsegStatus sfseg_e_measure_max(const double *pred,
                                     const uint8_t *gt,
                                     size_t h,
                                     size_t w,
                                     double *value);

/**
 * Joint L2 norm of two logit vectors of length `c` (1 when both are zero).
 *
 * # Safety
 * `a` and `b` hold `c` doubles; `value` is writable.
 */
enum SfsegStatus sfseg_phi_norm(const double *a, const double *b, size_t c, double *value);

/**
 * Fuses current and previous logits (`n × c`) into soft labels.
 *
 * # Safety
 * All three buffers hold `n·c` doubles.
 */
enum SfsegStatus sfseg_fuse(const double *current,
                            const double *previous,
                            size_t n,
                            size_t c,
                            double alpha,
                            double *fused);

/**
 * Mean soft cross-entropy between probabilities and soft targets (`n × c`).
 *
 * # Safety
 * `probs` and `target` hold `n·c` doubles; `value` is writable.
 */
enum SfsegStatus sfseg_soft_ce(const double *probs,
                               const double *target,
                               size_t n,
                               size_t c,
                               double *value);

/**
 * Per-pixel entropy normalized by `ln c`.
 *
 * # Safety
 * `probs` holds `n·c` doubles; `entropy` holds `n`.
 */
enum SfsegStatus sfseg_entropy(const double *probs, size_t n, size_t c, double *entropy);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SFSEG_H */
