#ifndef POLYPFLOW_H
#define POLYPFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PfStatus {
  PF_STATUS_OK = 0,
  PF_STATUS_NULL_POINTER = 1,
  PF_STATUS_INVALID_ARGUMENT = 2,
  PF_STATUS_BUFFER_TOO_SMALL = 3,
  PF_STATUS_IO = 4,
  PF_STATUS_CHECKPOINT = 5,
  PF_STATUS_NON_FINITE = 6,
  PF_STATUS_PANIC = 7,
} PfStatus;

/**
 * Opaque model handle owned by the caller between `pf_model_load` and
 * `pf_model_free`.
 */
typedef struct PfModel PfModel;

/**
 * Per-image segmentation scores, as reported by `polypflow eval`.
 */
typedef struct PfMetrics {
  double dice;
  double iou;
  double weighted_f;
  double s_measure;
  double e_measure;
  double mae;
} PfMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, or null if none.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *pf_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pf_version(void);

/**
 * Load a checkpoint. On success `*out` receives a handle that must be
 * released with `pf_model_free`.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
 */
enum PfStatus pf_model_load(const char *path, struct PfModel **out);

/**
 * Release a handle from `pf_model_load`. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void pf_model_free(struct PfModel *model);

/**
 * Square input resolution the model expects, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t pf_model_image_size(const struct PfModel *model);

/**
 * Number of Euler steps stored in the checkpoint configuration, or 0 for a
 * null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t pf_model_default_steps(const struct PfModel *model);

/**
 * Foreground probabilities for `batch` RGB images laid out as
 * `[batch][3][S][S]` with values in [0, 1]. Writes `batch * S * S` values.
 *
 * # Safety
 * `images` must hold `batch * 3 * S * S` values and `out` at least `out_len`.
 */
enum PfStatus pf_model_predict(const struct PfModel *model,
                               const double *images,
                               size_t batch,
                               size_t n_steps,
                               double *out,
                               size_t out_len);

/**
 * Logit states `z_0 .. z_N` of one image, written as `(n_steps + 1) * S * S`
 * values in step order.
 *
 * # Safety
 * `image` must hold `3 * S * S` values and `out` at least `out_len`.
 */
enum PfStatus pf_model_trajectory(const struct PfModel *model,
                                  const double *image,
                                  size_t n_steps,
                                  double *out,
                                  size_t out_len);

/**
 * Orthonormal 2-D DCT-II of each `height × width` plane of a
 * `channels × height × width` array.
 *
 * # Safety
 * `x` and `out` must each hold `channels * height * width` values.
 */
enum PfStatus pf_dct2(const double *x, size_t channels, size_t height, size_t width, double *out);

/**
 * Inverse of `pf_dct2`.
 *
 * # Safety
 * `c` and `out` must each hold `channels * height * width` values.
 */
enum PfStatus pf_idct2(const double *c, size_t channels, size_t height, size_t width, double *out);

/**
 * Score one `height × width` probability map against a binary mask.
 *
 * # Safety
 * `prob` and `mask` must each hold `height * width` values; `out` must be valid.
 */
enum PfStatus pf_image_metrics(const double *prob,
                               const double *mask,
                               size_t height,
                               size_t width,
                               struct PfMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POLYPFLOW_H */
