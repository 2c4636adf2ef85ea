#ifndef CAMO_FFI_H
#define CAMO_FFI_H

/* Generated by cbindgen from crates/ffi/src; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum CamoStatus {
  CAMO_STATUS_OK = 0,
  CAMO_STATUS_NULL_POINTER = 1,
  CAMO_STATUS_INVALID_ARGUMENT = 2,
  CAMO_STATUS_SHAPE = 3,
  CAMO_STATUS_CONFIG = 4,
  CAMO_STATUS_NON_FINITE = 5,
  CAMO_STATUS_DATA = 6,
  /**
   * A panic was caught at the boundary.
   */
  CAMO_STATUS_INTERNAL = 7,
} CamoStatus;

/**
 * A model instance. Only ever handled through a pointer.
 */
typedef struct CamoModel CamoModel;

/**
 * Whole-image scores for one prediction.
 */
typedef struct CamoScores {
  double s_measure;
  double weighted_f;
  double e_measure;
  double mae;
} CamoScores;

/**
 * Scores restricted to the ground-truth border band.
 */
typedef struct CamoBorderScores {
  double weighted_f;
  double mae;
  /**
   * The band held no foreground; the scores are then `(1, 0)`.
   */
  bool empty;
} CamoBorderScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *camo_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *camo_version(void);

/**
 * Builds a model from `key=value` configuration text. An empty string
 * selects the defaults. On success `*out` receives a handle that must be
 * released with [`camo_model_free`].
 *
 * # Safety
 * `config` must be null or a NUL-terminated string; `out` must be null or
 * writable.
 */
enum CamoStatus camo_model_new(const char *config, struct CamoModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from [`camo_model_new`] not yet freed.
 */
void camo_model_free(struct CamoModel *model);

/**
 * The configured input size.
 *
 * # Safety
 * `model` must be a live handle; `height` and `width` must be writable.
 */
enum CamoStatus camo_model_input_size(const struct CamoModel *model, size_t *height, size_t *width);

/**
 * Runs the model and writes the final map (`height * width` values in
 * `[0, 1]`) to `out`. Both sides must be multiples of 32.
 *
 * # Safety
 * `model` must be a live handle, `rgb` valid for `3 * height * width`
 * reads and `out` valid for `out_len` writes.
 */
enum CamoStatus camo_model_forward(const struct CamoModel *model,
                                   const double *rgb,
                                   size_t height,
                                   size_t width,
                                   double *out,
                                   size_t out_len);

/**
 * Like [`camo_model_forward`] but writes all five side outputs, finest
 * first, as `5 * height * width` values.
 *
 * # Safety
 * As for [`camo_model_forward`].
 */
enum CamoStatus camo_model_forward_all(const struct CamoModel *model,
                                       const double *rgb,
                                       size_t height,
                                       size_t width,
                                       double *out,
                                       size_t out_len);

/**
 * Scores one prediction against its ground truth. Both maps hold
 * `height * width` values in `[0, 1]`; the ground truth is binarized at 0.5.
 *
 * # Safety
 * `pred` and `gt` must be valid for `height * width` reads; `out` writable.
 */
enum CamoStatus camo_evaluate(const double *pred,
                              const double *gt,
                              size_t height,
                              size_t width,
                              struct CamoScores *out);

/**
 * Weighted F-measure and MAE inside the border band of width `kernel`.
 *
 * # Safety
 * As for [`camo_evaluate`].
 */
enum CamoStatus camo_border_scores(const double *pred,
                                   const double *gt,
                                   size_t height,
                                   size_t width,
                                   size_t kernel,
                                   struct CamoBorderScores *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAMO_FFI_H */
